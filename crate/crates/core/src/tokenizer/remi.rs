//! REMI encoding of scores.
//!
//! A track encodes as `Program` followed by one token group per bar:
//!
//! ```text
//! Bar_None [TimeSig] { Position [Tempo] { Pitch Velocity Duration } }
//! ```
//!
//! `TimeSig` and `Tempo` appear only when they differ from the running state;
//! the running state is empty at the start of an encoded range, so the first
//! bar of a range always states both. Notes sharing an onset share one
//! `Position` and are ordered by ascending pitch.

use std::ops::Range;

use super::{BaseToken, BaseVocab, TokenConfig, TokenizerError};
use crate::midi::{bar_grid, Note, Program, Score, TempoChange, TimeSignature, Track};

/// Tokens of one bar, beginning with `Bar_None`.
pub type BarTokens = Vec<BaseToken>;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodeReport {
    pub clamped_pitches: usize,
}

#[derive(Clone, Copy, Debug)]
struct QNote {
    pos: u16,
    pitch: u8,
    velocity: u8,
    duration: u16,
}

fn ticks_to_units(ticks: u32, tpq: u16, cfg: &TokenConfig) -> u32 {
    ((ticks as u64 * cfg.positions_per_quarter as u64 * 2 + tpq as u64) / (2 * tpq as u64)) as u32
}

fn units_to_ticks(units: u32, tpq: u16, cfg: &TokenConfig) -> u32 {
    let ppq = cfg.positions_per_quarter as u64;
    ((units as u64 * tpq as u64 * 2 + ppq) / (2 * ppq)) as u32
}

fn check_grid(tpq: u16, cfg: &TokenConfig) -> Result<(), TokenizerError> {
    if tpq < cfg.positions_per_quarter {
        return Err(TokenizerError::Unsupported(format!(
            "{tpq} ticks per quarter is coarser than the {}-step position grid",
            cfg.positions_per_quarter
        )));
    }
    Ok(())
}

fn bar_units(bar: (u32, u32), tpq: u16, cfg: &TokenConfig) -> Result<u16, TokenizerError> {
    let units = ticks_to_units(bar.1 - bar.0, tpq, cfg);
    if units == 0 || units > cfg.max_positions() as u32 {
        return Err(TokenizerError::Unsupported(format!(
            "bar of {} ticks does not fit the position grid",
            bar.1 - bar.0
        )));
    }
    Ok(units as u16)
}

fn bucket_notes(
    track: &Track,
    grid: &[(u32, u32)],
    tpq: u16,
    cfg: &TokenConfig,
    report: &mut EncodeReport,
) -> Result<Vec<Vec<QNote>>, TokenizerError> {
    let mut out: Vec<Vec<QNote>> = vec![Vec::new(); grid.len()];
    if grid.is_empty() {
        return Ok(out);
    }
    let mut bar = 0usize;
    for n in &track.notes {
        while bar + 1 < grid.len() && grid[bar].1 <= n.onset {
            bar += 1;
        }
        let mut b = bar;
        let mut pos = ticks_to_units(n.onset.saturating_sub(grid[b].0), tpq, cfg);
        let units = bar_units(grid[b], tpq, cfg)? as u32;
        if pos >= units {
            if b + 1 < grid.len() {
                b += 1;
                pos = 0;
            } else {
                pos = units - 1;
            }
        }
        let pitch = n.pitch.clamp(cfg.pitch_min, cfg.pitch_max);
        if pitch != n.pitch {
            report.clamped_pitches += 1;
        }
        let duration = ticks_to_units(n.duration, tpq, cfg).clamp(1, cfg.max_duration_units() as u32);
        out[b].push(QNote {
            pos: pos as u16,
            pitch,
            velocity: cfg.quantize_velocity(n.velocity),
            duration: duration as u16,
        });
    }
    for notes in &mut out {
        notes.sort_by_key(|q| (q.pos, q.pitch, q.duration, q.velocity));
    }
    Ok(out)
}

/// Running `TimeSig`/`Tempo` state of an encoder or decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Header {
    timesig: Option<(u8, u8)>,
    tempo: Option<u8>,
}

/// Encodes bars `range` of one track against a precomputed bar grid. The
/// running header state starts empty at `range.start`.
pub fn encode_track_bars(
    score: &Score,
    track: usize,
    grid: &[(u32, u32)],
    range: Range<usize>,
    vocab: &BaseVocab,
    report: &mut EncodeReport,
) -> Result<Vec<BarTokens>, TokenizerError> {
    let cfg = vocab.config();
    let tpq = score.ticks_per_quarter;
    check_grid(tpq, cfg)?;
    let track_ref = score
        .tracks
        .get(track)
        .ok_or_else(|| TokenizerError::Unsupported(format!("no track {track}")))?;
    let buckets = bucket_notes(track_ref, grid, tpq, cfg, report)?;
    let supported = cfg.time_signatures();
    let mut header = Header::default();
    let mut out = Vec::with_capacity(range.len());
    for b in range {
        let bar = grid[b];
        let units = bar_units(bar, tpq, cfg)?;
        let mut tokens = vec![BaseToken::BarNone];
        let ts = score.timesig_at(bar.0);
        let pair = (ts.numerator, ts.denominator);
        if header.timesig != Some(pair) {
            if !supported.contains(&pair) {
                return Err(TokenizerError::Unsupported(format!(
                    "time signature {}/{}",
                    pair.0, pair.1
                )));
            }
            tokens.push(BaseToken::TimeSig(pair.0, pair.1));
            header.timesig = Some(pair);
        }

        let mut tempo_events: Vec<(u16, u8)> = vec![(0, cfg.tempo_bin(score.tempo_at(bar.0).bpm()))];
        for t in score.tempo_map.iter().filter(|t| t.tick > bar.0 && t.tick < bar.1) {
            let pos = ticks_to_units(t.tick - bar.0, tpq, cfg);
            if pos < units as u32 {
                tempo_events.push((pos as u16, cfg.tempo_bin(t.bpm())));
            }
        }

        let notes = &buckets[b];
        let mut positions: Vec<u16> = notes.iter().map(|n| n.pos).chain(tempo_events.iter().map(|e| e.0)).collect();
        positions.sort_unstable();
        positions.dedup();
        for pos in positions {
            // last tempo event at this position wins
            let tempo = tempo_events.iter().rev().find(|e| e.0 == pos).map(|e| e.1);
            let change = tempo.filter(|&bin| header.tempo != Some(bin));
            let here: Vec<&QNote> = notes.iter().filter(|n| n.pos == pos).collect();
            if change.is_none() && here.is_empty() {
                continue;
            }
            tokens.push(BaseToken::Position(pos));
            if let Some(bin) = change {
                tokens.push(BaseToken::Tempo(bin));
                header.tempo = Some(bin);
            }
            for n in here {
                tokens.push(BaseToken::Pitch(n.pitch));
                tokens.push(BaseToken::Velocity(n.velocity));
                tokens.push(BaseToken::Duration(n.duration));
            }
        }
        out.push(tokens);
    }
    Ok(out)
}

/// Encodes every track of `score` as `Program` followed by all bars of the
/// score's bar grid.
pub fn encode_base(score: &Score, vocab: &BaseVocab) -> Result<(Vec<Vec<u32>>, EncodeReport), TokenizerError> {
    let grid = bar_grid(score)?;
    let mut report = EncodeReport::default();
    let mut out = Vec::with_capacity(score.tracks.len());
    for (i, track) in score.tracks.iter().enumerate() {
        let bars = encode_track_bars(score, i, &grid, 0..grid.len(), vocab, &mut report)?;
        let mut tokens = vec![BaseToken::Program(track.program)];
        tokens.extend(bars.into_iter().flatten());
        out.push(vocab.encode(&tokens)?);
    }
    Ok((out, report))
}

/// Where a decoded fragment sits and what header state precedes it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeContext {
    pub ticks_per_quarter: u16,
    pub start_tick: u32,
    pub timesig: (u8, u8),
    pub tempo_bin: Option<u8>,
    /// The first bar is open from the first token, without a `Bar_None`.
    pub implicit_first_bar: bool,
}

impl DecodeContext {
    pub fn new(ticks_per_quarter: u16) -> Self {
        Self {
            ticks_per_quarter,
            start_tick: 0,
            timesig: (4, 4),
            tempo_bin: None,
            implicit_first_bar: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodedFragment {
    pub program: Option<Program>,
    pub notes: Vec<Note>,
    pub tempo_changes: Vec<TempoChange>,
    pub timesig_changes: Vec<TimeSignature>,
    pub bars: Vec<(u32, u32)>,
    /// Attribute-control tokens found at the head of each bar.
    pub controls: Vec<Vec<BaseToken>>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Expect {
    Start,
    BarHead,
    AfterPosition,
    Velocity,
    Duration,
    AfterNote,
}

/// Decodes base ids into notes. The stream must follow the bar grammar in the
/// module docs; any deviation is reported with its index.
pub fn decode_base(ids: &[u32], vocab: &BaseVocab, ctx: DecodeContext) -> Result<DecodedFragment, TokenizerError> {
    let cfg = vocab.config();
    let tpq = ctx.ticks_per_quarter;
    check_grid(tpq, cfg)?;
    let mut frag = DecodedFragment::default();
    let mut ts = ctx.timesig;
    let mut tempo = ctx.tempo_bin;
    let tempos = cfg.tempo_values();
    let mut bar_start = ctx.start_tick;
    let mut in_bar = false;
    let mut last_pos: Option<u16> = None;
    let mut cur_tick = 0u32;
    let mut pending: (u8, u8) = (0, 0);
    let mut expect = Expect::Start;

    let bar_ticks = |ts: (u8, u8)| -> u32 { tpq as u32 * 4 * ts.0 as u32 / ts.1 as u32 };
    let err = |index: usize, message: String| TokenizerError::Decode { index, message };

    let open_bar = |frag: &mut DecodedFragment, in_bar: &mut bool, bar_start: &mut u32, ts: (u8, u8)| {
        if *in_bar {
            let (s, _) = frag.bars.last().copied().unwrap();
            *bar_start = s + bar_ticks(ts);
            let last = frag.bars.last_mut().unwrap();
            last.1 = *bar_start;
        }
        frag.bars.push((*bar_start, *bar_start + bar_ticks(ts)));
        frag.controls.push(Vec::new());
        *in_bar = true;
    };

    if ctx.implicit_first_bar {
        open_bar(&mut frag, &mut in_bar, &mut bar_start, ts);
        expect = Expect::BarHead;
    }

    for (i, &id) in ids.iter().enumerate() {
        let tok = vocab.token(id).ok_or(TokenizerError::IdOutOfRange { id, size: vocab.len() })?;
        match tok {
            BaseToken::Program(p) => {
                if i != 0 || in_bar {
                    return Err(err(i, "Program must be the first token".into()));
                }
                frag.program = Some(p);
            }
            BaseToken::BarNone => {
                if matches!(expect, Expect::Velocity | Expect::Duration) {
                    return Err(err(i, "bar ended inside a note".into()));
                }
                open_bar(&mut frag, &mut in_bar, &mut bar_start, ts);
                last_pos = None;
                expect = Expect::BarHead;
            }
            t if t.is_control() => {
                if expect != Expect::BarHead || last_pos.is_some() {
                    return Err(err(i, format!("{t} outside a bar head")));
                }
                frag.controls.last_mut().unwrap().push(t);
            }
            BaseToken::TimeSig(n, d) => {
                if expect != Expect::BarHead || last_pos.is_some() {
                    return Err(err(i, "TimeSig outside a bar head".into()));
                }
                ts = (n, d);
                let bar = frag.bars.last_mut().unwrap();
                bar.1 = bar.0 + bar_ticks(ts);
                frag.timesig_changes.push(TimeSignature::new(bar.0, n, d));
            }
            BaseToken::Position(p) => {
                if !in_bar || matches!(expect, Expect::Velocity | Expect::Duration) {
                    return Err(err(i, "Position outside a bar or inside a note".into()));
                }
                if last_pos.is_some_and(|lp| p <= lp) {
                    return Err(err(i, format!("Position {p} does not advance")));
                }
                let units = ticks_to_units(bar_ticks(ts), tpq, cfg);
                if p as u32 >= units {
                    return Err(err(i, format!("Position {p} beyond bar of {units} steps")));
                }
                last_pos = Some(p);
                cur_tick = frag.bars.last().unwrap().0 + units_to_ticks(p as u32, tpq, cfg);
                expect = Expect::AfterPosition;
            }
            BaseToken::Tempo(bin) => {
                if expect != Expect::AfterPosition {
                    return Err(err(i, "Tempo must follow Position".into()));
                }
                let bpm = tempos
                    .get(bin as usize)
                    .copied()
                    .ok_or_else(|| err(i, format!("tempo bin {bin} out of range")))?;
                tempo = Some(bin);
                frag.tempo_changes.push(TempoChange::from_bpm(cur_tick, bpm));
            }
            BaseToken::Pitch(p) => {
                if !matches!(expect, Expect::AfterPosition | Expect::AfterNote) {
                    return Err(err(i, "Pitch without a Position".into()));
                }
                pending.0 = p;
                expect = Expect::Velocity;
            }
            BaseToken::Velocity(v) => {
                if expect != Expect::Velocity {
                    return Err(err(i, "Velocity must follow Pitch".into()));
                }
                pending.1 = v;
                expect = Expect::Duration;
            }
            BaseToken::Duration(d) => {
                if expect != Expect::Duration {
                    return Err(err(i, "Duration must follow Velocity".into()));
                }
                let dur = units_to_ticks(d as u32, tpq, cfg).max(1);
                frag.notes.push(Note::new(pending.0, pending.1, cur_tick, dur));
                expect = Expect::AfterNote;
            }
            other => return Err(err(i, format!("{other} cannot appear in a bar stream"))),
        }
    }
    if matches!(expect, Expect::Velocity | Expect::Duration) {
        return Err(err(ids.len(), "stream ends inside a note".into()));
    }
    let _ = tempo;
    frag.notes.sort_by_key(|n| (n.onset, n.pitch));
    Ok(frag)
}

/// Rebuilds a score from per-track token streams produced by [`encode_base`].
/// Tempo and time-signature maps are taken from the first track.
pub fn decode_score(tracks: &[Vec<u32>], vocab: &BaseVocab, ticks_per_quarter: u16) -> Result<Score, TokenizerError> {
    let mut score = Score::new(ticks_per_quarter);
    score.tracks.clear();
    for (i, ids) in tracks.iter().enumerate() {
        let frag = decode_base(ids, vocab, DecodeContext::new(ticks_per_quarter))?;
        if i == 0 {
            if !frag.tempo_changes.is_empty() {
                score.tempo_map = dedup_by_tick(frag.tempo_changes.clone(), |t| t.tick);
            }
            if !frag.timesig_changes.is_empty() {
                score.timesig_map = dedup_by_tick(frag.timesig_changes.clone(), |t| t.tick);
            }
        }
        let mut track = Track {
            program: frag.program.unwrap_or(Program::Melodic(0)),
            notes: frag.notes,
        };
        track.normalize();
        score.tracks.push(track);
    }
    if score.tempo_map[0].tick != 0 {
        let first = score.tempo_map[0];
        score.tempo_map.insert(0, TempoChange { tick: 0, ..first });
    }
    if score.timesig_map[0].tick != 0 {
        let first = score.timesig_map[0];
        score.timesig_map.insert(0, TimeSignature { tick: 0, ..first });
    }
    Ok(score)
}

fn dedup_by_tick<T: Copy>(items: Vec<T>, tick: impl Fn(&T) -> u32) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(items.len());
    for it in items {
        match out.last_mut() {
            Some(last) if tick(last) == tick(&it) => *last = it,
            _ => out.push(it),
        }
    }
    out
}

/// Snaps a score onto the token grid: `decode(encode(score))`.
pub fn quantize_score(score: &Score, vocab: &BaseVocab) -> Result<Score, TokenizerError> {
    let (ids, _) = encode_base(score, vocab)?;
    decode_score(&ids, vocab, score.ticks_per_quarter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::{Note, Track};

    fn vocab() -> BaseVocab {
        BaseVocab::new(TokenConfig::default())
    }

    fn one_track(notes: Vec<Note>) -> Score {
        let mut s = Score::new(480);
        let mut t = Track::new(Program::Melodic(0));
        t.notes = notes;
        s.tracks.push(t);
        s
    }

    fn bars_of(score: &Score) -> Vec<BarTokens> {
        let v = vocab();
        let grid = bar_grid(score).unwrap();
        let mut r = EncodeReport::default();
        encode_track_bars(score, 0, &grid, 0..grid.len(), &v, &mut r).unwrap()
    }

    #[test]
    fn first_bar_states_header() {
        let bars = bars_of(&one_track(vec![Note::new(60, 100, 0, 480)]));
        let bin = TokenConfig::default().tempo_bin(120.0);
        assert_eq!(
            bars[0],
            vec![
                BaseToken::BarNone,
                BaseToken::TimeSig(4, 4),
                BaseToken::Position(0),
                BaseToken::Tempo(bin),
                BaseToken::Pitch(60),
                BaseToken::Velocity(99),
                BaseToken::Duration(8),
            ]
        );
    }

    #[test]
    fn empty_bar_is_single_bar_none() {
        let bars = bars_of(&one_track(vec![Note::new(60, 100, 0, 480), Note::new(62, 100, 3840, 480)]));
        assert_eq!(bars.len(), 3);
        assert_eq!(bars[1], vec![BaseToken::BarNone]);
    }

    #[test]
    fn note_at_beat_zero_of_later_bar() {
        let bars = bars_of(&one_track(vec![Note::new(60, 100, 0, 480), Note::new(55, 100, 1920, 240)]));
        assert_eq!(
            bars[1],
            vec![
                BaseToken::BarNone,
                BaseToken::Position(0),
                BaseToken::Pitch(55),
                BaseToken::Velocity(99),
                BaseToken::Duration(4),
            ]
        );
    }

    /// Naive emitter: one Position per distinct onset, then note groups by
    /// ascending pitch.
    fn naive_bar(notes: &[(u16, u8, u8, u16)]) -> Vec<BaseToken> {
        let mut out = vec![BaseToken::BarNone];
        let mut sorted = notes.to_vec();
        sorted.sort();
        let mut last = None;
        for (pos, pitch, vel, dur) in sorted {
            if last != Some(pos) {
                out.push(BaseToken::Position(pos));
                last = Some(pos);
            }
            out.extend([BaseToken::Pitch(pitch), BaseToken::Velocity(vel), BaseToken::Duration(dur)]);
        }
        out
    }

    #[test]
    fn simultaneous_notes_share_position() {
        let s = one_track(vec![
            Note::new(60, 100, 0, 480),
            Note::new(67, 99, 1920 + 240, 240),
            Note::new(64, 99, 1920 + 240, 480),
            Note::new(72, 99, 1920 + 960, 120),
        ]);
        let bars = bars_of(&s);
        assert_eq!(bars[1], naive_bar(&[(4, 67, 99, 4), (4, 64, 99, 8), (16, 72, 99, 2)]));
    }

    #[test]
    fn decode_inverts_encode_on_grid() {
        let s = one_track(vec![Note::new(60, 99, 0, 480), Note::new(64, 99, 480, 240), Note::new(67, 99, 480, 960)]);
        let v = vocab();
        let (ids, _) = encode_base(&s, &v).unwrap();
        let back = decode_score(&ids, &v, 480).unwrap();
        assert_eq!(back.tracks[0].notes, s.tracks[0].notes);
        assert_eq!(back.timesig_map, s.timesig_map);
    }

    #[test]
    fn ungrammatical_streams_are_rejected_with_index() {
        let v = vocab();
        let ids = v
            .encode(&[BaseToken::BarNone, BaseToken::Position(0), BaseToken::Duration(4)])
            .unwrap();
        match decode_base(&ids, &v, DecodeContext::new(480)) {
            Err(TokenizerError::Decode { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected decode error, got {other:?}"),
        }
        let ids = v
            .encode(&[BaseToken::BarNone, BaseToken::Position(4), BaseToken::Position(2)])
            .unwrap();
        assert!(decode_base(&ids, &v, DecodeContext::new(480)).is_err());
        let ids = v.encode(&[BaseToken::BarNone, BaseToken::Position(1), BaseToken::Pitch(60)]).unwrap();
        assert!(decode_base(&ids, &v, DecodeContext::new(480)).is_err());
    }

    #[test]
    fn out_of_range_pitch_is_clamped_and_counted() {
        let s = one_track(vec![Note::new(10, 99, 0, 480), Note::new(120, 99, 0, 480)]);
        let (ids, report) = encode_base(&s, &vocab()).unwrap();
        assert_eq!(report.clamped_pitches, 2);
        let back = decode_score(&ids, &vocab(), 480).unwrap();
        let pitches: Vec<u8> = back.tracks[0].notes.iter().map(|n| n.pitch).collect();
        assert_eq!(pitches, vec![21, 108]);
    }

    #[test]
    fn tempo_change_mid_bar_is_encoded_after_position() {
        let mut s = one_track(vec![Note::new(60, 99, 0, 3840)]);
        s.tempo_map.push(TempoChange::from_bpm(960, 90.0));
        let bars = bars_of(&s);
        let bin = TokenConfig::default().tempo_bin(90.0);
        assert!(bars[0].windows(2).any(|w| w == [BaseToken::Position(16), BaseToken::Tempo(bin)]));
        let v = vocab();
        let (ids, _) = encode_base(&s, &v).unwrap();
        let back = decode_score(&ids, &v, 480).unwrap();
        assert_eq!(back.tempo_map.len(), 2);
        assert_eq!(back.tempo_map[1].tick, 960);
    }
}
