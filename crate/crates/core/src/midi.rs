//! Standard MIDI File reading and writing, plus the bar grid of a score.
//!
//! Only the event subset the rest of the crate needs survives a round trip:
//! notes, tempo changes, time signatures and program changes. Everything else
//! (controllers, pitch bend, aftertouch, sysex) is dropped and counted in a
//! [`ReadReport`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Zero-based MIDI channel reserved for percussion.
pub const DRUM_CHANNEL: u8 = 9;
pub const DEFAULT_US_PER_QUARTER: u32 = 500_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported MIDI file: {0}")]
    Unsupported(String),
    #[error("invalid score: {0}")]
    Validation(String),
}

fn parse_err(offset: usize, message: impl Into<String>) -> MidiError {
    MidiError::Parse {
        offset,
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Note {
    pub pitch: u8,
    pub velocity: u8,
    pub onset: u32,
    pub duration: u32,
}

impl Note {
    pub fn new(pitch: u8, velocity: u8, onset: u32, duration: u32) -> Self {
        Self {
            pitch,
            velocity,
            onset,
            duration,
        }
    }

    pub fn offset(&self) -> u32 {
        self.onset + self.duration
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Program {
    Melodic(u8),
    Drums,
}

impl Program {
    pub fn is_drums(self) -> bool {
        matches!(self, Program::Drums)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Track {
    pub program: Program,
    pub notes: Vec<Note>,
}

impl Track {
    pub fn new(program: Program) -> Self {
        Self {
            program,
            notes: Vec::new(),
        }
    }

    /// Sorts notes by `(onset, pitch)` and merges overlapping notes of the
    /// same pitch into their union interval. The earliest note keeps its
    /// velocity. Returns the number of notes absorbed by merging.
    pub fn normalize(&mut self) -> usize {
        self.notes.sort_by_key(|n| (n.pitch, n.onset, n.duration));
        let mut merged: Vec<Note> = Vec::with_capacity(self.notes.len());
        let mut absorbed = 0;
        for note in self.notes.drain(..) {
            match merged.last_mut() {
                Some(prev) if prev.pitch == note.pitch && note.onset < prev.offset() => {
                    let end = prev.offset().max(note.offset());
                    prev.duration = end - prev.onset;
                    absorbed += 1;
                }
                _ => merged.push(note),
            }
        }
        merged.sort_by_key(|n| (n.onset, n.pitch));
        self.notes = merged;
        absorbed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempoChange {
    pub tick: u32,
    pub us_per_quarter: u32,
}

impl TempoChange {
    pub fn from_bpm(tick: u32, bpm: f64) -> Self {
        Self {
            tick,
            us_per_quarter: (60_000_000.0 / bpm).round() as u32,
        }
    }

    pub fn bpm(&self) -> f64 {
        60_000_000.0 / self.us_per_quarter as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSignature {
    pub tick: u32,
    pub numerator: u8,
    pub denominator: u8,
}

impl TimeSignature {
    pub fn new(tick: u32, numerator: u8, denominator: u8) -> Self {
        Self {
            tick,
            numerator,
            denominator,
        }
    }
}

/// An in-memory multi-track document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub ticks_per_quarter: u16,
    pub tempo_map: Vec<TempoChange>,
    pub timesig_map: Vec<TimeSignature>,
    pub tracks: Vec<Track>,
}

impl Score {
    /// An empty score at 120 BPM in 4/4.
    pub fn new(ticks_per_quarter: u16) -> Self {
        Self {
            ticks_per_quarter,
            tempo_map: vec![TempoChange {
                tick: 0,
                us_per_quarter: DEFAULT_US_PER_QUARTER,
            }],
            timesig_map: vec![TimeSignature::new(0, 4, 4)],
            tracks: Vec::new(),
        }
    }

    pub fn note_count(&self) -> usize {
        self.tracks.iter().map(|t| t.notes.len()).sum()
    }

    /// End of the last sounding note across all tracks.
    pub fn end_tick(&self) -> u32 {
        self.tracks
            .iter()
            .flat_map(|t| t.notes.iter().map(Note::offset))
            .max()
            .unwrap_or(0)
    }

    pub fn tempo_at(&self, tick: u32) -> TempoChange {
        *self
            .tempo_map
            .iter()
            .take_while(|t| t.tick <= tick)
            .last()
            .unwrap_or(&self.tempo_map[0])
    }

    pub fn timesig_at(&self, tick: u32) -> TimeSignature {
        *self
            .timesig_map
            .iter()
            .take_while(|t| t.tick <= tick)
            .last()
            .unwrap_or(&self.timesig_map[0])
    }

    pub fn ticks_per_bar(&self, ts: &TimeSignature) -> Result<u32, MidiError> {
        bar_length(self.ticks_per_quarter, ts)
    }

    pub fn validate(&self) -> Result<(), MidiError> {
        if self.ticks_per_quarter == 0 || self.ticks_per_quarter > 0x7fff {
            return Err(MidiError::Validation(format!(
                "ticks per quarter {} out of range",
                self.ticks_per_quarter
            )));
        }
        check_map(&self.tempo_map, |t| t.tick, "tempo")?;
        check_map(&self.timesig_map, |t| t.tick, "time signature")?;
        if self.tempo_map.iter().any(|t| t.us_per_quarter == 0 || t.us_per_quarter > 0xff_ffff) {
            return Err(MidiError::Validation("tempo out of range".into()));
        }
        for ts in &self.timesig_map {
            bar_length(self.ticks_per_quarter, ts)?;
        }
        for (i, track) in self.tracks.iter().enumerate() {
            if let Program::Melodic(p) = track.program {
                if p > 127 {
                    return Err(MidiError::Validation(format!("track {i}: program {p} > 127")));
                }
            }
            for w in track.notes.windows(2) {
                if (w[0].onset, w[0].pitch) > (w[1].onset, w[1].pitch) {
                    return Err(MidiError::Validation(format!("track {i}: notes not sorted")));
                }
            }
            let mut last_end = [None::<u32>; 128];
            for n in &track.notes {
                if n.pitch > 127 || n.velocity == 0 || n.velocity > 127 || n.duration == 0 {
                    return Err(MidiError::Validation(format!("track {i}: invalid note {n:?}")));
                }
                if let Some(end) = last_end[n.pitch as usize] {
                    if n.onset < end {
                        return Err(MidiError::Validation(format!(
                            "track {i}: overlapping notes on pitch {}",
                            n.pitch
                        )));
                    }
                }
                last_end[n.pitch as usize] = Some(n.offset());
            }
        }
        Ok(())
    }
}

fn check_map<T>(map: &[T], tick: impl Fn(&T) -> u32, what: &str) -> Result<(), MidiError> {
    if map.first().map(&tick) != Some(0) {
        return Err(MidiError::Validation(format!("{what} map must start at tick 0")));
    }
    if map.windows(2).any(|w| tick(&w[0]) >= tick(&w[1])) {
        return Err(MidiError::Validation(format!("{what} map not strictly increasing")));
    }
    Ok(())
}

fn bar_length(tpq: u16, ts: &TimeSignature) -> Result<u32, MidiError> {
    if ts.denominator == 0 || ts.numerator == 0 {
        return Err(MidiError::Validation(format!(
            "time signature {}/{} has a zero term",
            ts.numerator, ts.denominator
        )));
    }
    if !ts.denominator.is_power_of_two() {
        return Err(MidiError::Validation(format!(
            "time signature denominator {} is not a power of two",
            ts.denominator
        )));
    }
    let whole = tpq as u32 * 4 * ts.numerator as u32;
    if whole % ts.denominator as u32 != 0 {
        return Err(MidiError::Validation(format!(
            "{}/{} does not divide {tpq} ticks per quarter",
            ts.numerator, ts.denominator
        )));
    }
    Ok(whole / ts.denominator as u32)
}

/// Bars covering `[0, end_of_last_note)`. Empty when the score has no notes.
pub fn bar_grid(score: &Score) -> Result<Vec<(u32, u32)>, MidiError> {
    bar_grid_until(score, score.end_tick())
}

/// Contiguous bars from tick 0 until the first bar whose end reaches `end`.
///
/// A time-signature change that falls inside a bar ends that bar early, so the
/// grid stays a partition.
pub fn bar_grid_until(score: &Score, end: u32) -> Result<Vec<(u32, u32)>, MidiError> {
    let mut bars = Vec::new();
    let mut start = 0u32;
    let map = &score.timesig_map;
    if map.is_empty() {
        return Err(MidiError::Validation("empty time signature map".into()));
    }
    let mut seg = 0usize;
    while start < end {
        while seg + 1 < map.len() && map[seg + 1].tick <= start {
            seg += 1;
        }
        let len = bar_length(score.ticks_per_quarter, &map[seg])?;
        let mut stop = start + len;
        if let Some(next) = map.get(seg + 1) {
            if next.tick < stop {
                stop = next.tick;
            }
        }
        bars.push((start, stop));
        start = stop;
    }
    Ok(bars)
}

/// Diagnostics collected while parsing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadReport {
    /// Note-ons never released; closed at the end of their track chunk.
    pub dangling_notes: usize,
    /// Controller, pitch-bend, aftertouch and sysex events.
    pub dropped_events: usize,
    /// Note-on/note-off pairs with zero length.
    pub zero_length_notes: usize,
    /// Same-pitch overlaps merged into one note.
    pub merged_notes: usize,
}

pub fn read_midi(bytes: &[u8]) -> Result<Score, MidiError> {
    read_midi_with_report(bytes).map(|(s, _)| s)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| parse_err(self.pos, "unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.pos + n > self.data.len() {
            return Err(parse_err(self.pos, format!("need {n} bytes")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(parse_err(start, "variable-length quantity longer than 4 bytes"))
    }
}

struct ChannelTrack {
    channel: u8,
    program: u8,
    // (open count, onset, velocity) per pitch
    active: Vec<(u16, u32, u8)>,
    notes: Vec<Note>,
}

impl ChannelTrack {
    fn new(channel: u8) -> Self {
        Self {
            channel,
            program: 0,
            active: vec![(0, 0, 0); 128],
            notes: Vec::new(),
        }
    }

    fn note_on(&mut self, pitch: u8, velocity: u8, tick: u32) {
        let slot = &mut self.active[pitch as usize];
        if slot.0 == 0 {
            slot.1 = tick;
            slot.2 = velocity;
        }
        slot.0 += 1;
    }

    fn note_off(&mut self, pitch: u8, tick: u32, report: &mut ReadReport) {
        let slot = &mut self.active[pitch as usize];
        if slot.0 == 0 {
            return;
        }
        slot.0 -= 1;
        if slot.0 == 0 {
            if tick > slot.1 {
                self.notes.push(Note::new(pitch, slot.2, slot.1, tick - slot.1));
            } else {
                report.zero_length_notes += 1;
            }
        }
    }

    fn close(&mut self, tick: u32, report: &mut ReadReport) {
        for pitch in 0..128u8 {
            let slot = self.active[pitch as usize];
            if slot.0 > 0 {
                report.dangling_notes += 1;
                let dur = tick.saturating_sub(slot.1).max(1);
                self.notes.push(Note::new(pitch, slot.2, slot.1, dur));
                self.active[pitch as usize].0 = 0;
            }
        }
    }
}

/// Parses an SMF type 0 or 1 file. Channel-10 material becomes a drums track;
/// every other (chunk, channel) pair with note or program events becomes a
/// melodic track in order of first appearance.
pub fn read_midi_with_report(bytes: &[u8]) -> Result<(Score, ReadReport), MidiError> {
    let mut cur = Cursor { data: bytes, pos: 0 };
    if cur.take(4)? != b"MThd" {
        return Err(parse_err(0, "missing MThd header"));
    }
    let header_len = cur.u32()? as usize;
    if header_len < 6 {
        return Err(parse_err(4, "header chunk shorter than 6 bytes"));
    }
    let format = cur.u16()?;
    let ntracks = cur.u16()?;
    let division = cur.u16()?;
    cur.take(header_len - 6)?;
    if format == 2 {
        return Err(MidiError::Unsupported("SMF type 2 is not supported".into()));
    }
    if format > 2 {
        return Err(parse_err(8, format!("unknown SMF format {format}")));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::Unsupported("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(parse_err(12, "zero ticks per quarter"));
    }

    let mut report = ReadReport::default();
    let mut tempo_map: Vec<TempoChange> = Vec::new();
    let mut timesig_map: Vec<TimeSignature> = Vec::new();
    let mut tracks = Vec::new();
    let mut seen_chunks = 0u16;

    while seen_chunks < ntracks && cur.pos < bytes.len() {
        let chunk_start = cur.pos;
        let id = cur.take(4)?;
        let len = cur.u32()? as usize;
        if id != b"MTrk" {
            cur.take(len)
                .map_err(|_| parse_err(chunk_start, "truncated unknown chunk"))?;
            continue;
        }
        seen_chunks += 1;
        let body = cur
            .take(len)
            .map_err(|_| parse_err(chunk_start, format!("track chunk declares {len} bytes past end of file")))?;
        let mut tc = Cursor {
            data: body,
            pos: 0,
        };
        let base = chunk_start + 8;
        let mut tick = 0u32;
        let mut running: Option<u8> = None;
        let mut groups: Vec<ChannelTrack> = Vec::new();
        let mut has_global_meta = false;

        let group = |groups: &mut Vec<ChannelTrack>, ch: u8| -> usize {
            match groups.iter().position(|g| g.channel == ch) {
                Some(i) => i,
                None => {
                    groups.push(ChannelTrack::new(ch));
                    groups.len() - 1
                }
            }
        };

        while tc.pos < body.len() {
            let delta = tc.vlq().map_err(|e| offset_by(e, base))?;
            tick = tick.saturating_add(delta);
            let ev_pos = base + tc.pos;
            let first = tc.u8().map_err(|e| offset_by(e, base))?;
            let status = if first & 0x80 != 0 {
                first
            } else {
                tc.pos -= 1;
                running.ok_or_else(|| parse_err(ev_pos, "data byte without running status"))?
            };
            match status {
                0xff => {
                    running = None;
                    let kind = tc.u8().map_err(|e| offset_by(e, base))?;
                    let len = tc.vlq().map_err(|e| offset_by(e, base))? as usize;
                    let data = tc.take(len).map_err(|e| offset_by(e, base))?;
                    match kind {
                        0x2f => break,
                        0x51 => {
                            if len != 3 {
                                return Err(parse_err(ev_pos, "tempo event must carry 3 bytes"));
                            }
                            let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                            if us == 0 {
                                return Err(parse_err(ev_pos, "zero tempo"));
                            }
                            tempo_map.push(TempoChange {
                                tick,
                                us_per_quarter: us,
                            });
                            has_global_meta = true;
                        }
                        0x58 => {
                            if len < 2 {
                                return Err(parse_err(ev_pos, "time signature event too short"));
                            }
                            if data[1] > 7 {
                                return Err(parse_err(ev_pos, "time signature denominator too large"));
                            }
                            timesig_map.push(TimeSignature::new(tick, data[0], 1u8 << data[1]));
                            has_global_meta = true;
                        }
                        _ => {}
                    }
                }
                0xf0 | 0xf7 => {
                    running = None;
                    let len = tc.vlq().map_err(|e| offset_by(e, base))? as usize;
                    tc.take(len).map_err(|e| offset_by(e, base))?;
                    report.dropped_events += 1;
                }
                0x80..=0xef => {
                    running = Some(status);
                    let ch = status & 0x0f;
                    let kind = status >> 4;
                    let d1 = tc.u8().map_err(|e| offset_by(e, base))?;
                    let d2 = if matches!(kind, 0xc | 0xd) {
                        0
                    } else {
                        tc.u8().map_err(|e| offset_by(e, base))?
                    };
                    if d1 > 127 || d2 > 127 {
                        return Err(parse_err(ev_pos, "channel event data byte above 127"));
                    }
                    match kind {
                        0x9 if d2 > 0 => {
                            let g = group(&mut groups, ch);
                            groups[g].note_on(d1, d2, tick);
                        }
                        0x8 | 0x9 => {
                            let g = group(&mut groups, ch);
                            groups[g].note_off(d1, tick, &mut report);
                        }
                        0xc => {
                            let g = group(&mut groups, ch);
                            let gr = &mut groups[g];
                            if gr.notes.is_empty() && gr.active.iter().all(|a| a.0 == 0) {
                                gr.program = d1;
                            }
                        }
                        _ => report.dropped_events += 1,
                    }
                }
                _ => return Err(parse_err(ev_pos, format!("invalid status byte {status:#04x}"))),
            }
        }
        for g in groups.iter_mut() {
            g.close(tick, &mut report);
        }
        if groups.is_empty() && !has_global_meta {
            tracks.push(Track::new(Program::Melodic(0)));
        }
        for g in groups {
            let program = if g.channel == DRUM_CHANNEL {
                Program::Drums
            } else {
                Program::Melodic(g.program)
            };
            let mut track = Track {
                program,
                notes: g.notes,
            };
            report.merged_notes += track.normalize();
            tracks.push(track);
        }
    }
    if format == 0 && seen_chunks > 1 {
        return Err(parse_err(10, "SMF type 0 with more than one track chunk"));
    }

    let mut score = Score {
        ticks_per_quarter: division,
        tempo_map: finish_map(tempo_map, |t| t.tick, TempoChange {
            tick: 0,
            us_per_quarter: DEFAULT_US_PER_QUARTER,
        }),
        timesig_map: finish_map(timesig_map, |t| t.tick, TimeSignature::new(0, 4, 4)),
        tracks,
    };
    if score.timesig_map.iter().any(|t| t.numerator == 0) {
        return Err(MidiError::Validation("time signature with zero numerator".into()));
    }
    score.tracks.shrink_to_fit();
    Ok((score, report))
}

fn offset_by(e: MidiError, base: usize) -> MidiError {
    match e {
        MidiError::Parse { offset, message } => MidiError::Parse {
            offset: offset + base,
            message,
        },
        other => other,
    }
}

/// Stable-sorts by tick, keeps the last event at each tick and makes sure the
/// map starts at tick 0.
fn finish_map<T: Copy>(mut map: Vec<T>, tick: impl Fn(&T) -> u32, default: T) -> Vec<T> {
    map.sort_by_key(&tick);
    let mut out: Vec<T> = Vec::with_capacity(map.len() + 1);
    for item in map {
        match out.last_mut() {
            Some(last) if tick(last) == tick(&item) => *last = item,
            _ => out.push(item),
        }
    }
    if out.first().map(&tick) != Some(0) {
        out.insert(0, default);
    }
    out
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len();
    i -= 1;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = ((value & 0x7f) as u8) | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn push_chunk(out: &mut Vec<u8>, events: &[(u32, Vec<u8>)]) {
    let mut body = Vec::new();
    let mut last = 0u32;
    for (tick, bytes) in events {
        push_vlq(&mut body, tick - last);
        body.extend_from_slice(bytes);
        last = *tick;
    }
    push_vlq(&mut body, 0);
    body.extend_from_slice(&[0xff, 0x2f, 0x00]);
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
}

/// Serializes a score as SMF type 1: a conductor chunk holding the tempo and
/// time-signature maps, then one chunk per track.
///
/// Output is deterministic: no running status, note-offs are written as
/// `0x8n` with velocity 0, and at equal ticks note-offs precede note-ons.
pub fn write_midi(score: &Score) -> Result<Vec<u8>, MidiError> {
    score.validate()?;
    if score.tracks.len() + 1 > u16::MAX as usize {
        return Err(MidiError::Validation("too many tracks".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&((score.tracks.len() + 1) as u16).to_be_bytes());
    out.extend_from_slice(&score.ticks_per_quarter.to_be_bytes());

    let mut conductor: Vec<(u32, u8, Vec<u8>)> = Vec::new();
    for ts in &score.timesig_map {
        let power = ts.denominator.trailing_zeros() as u8;
        conductor.push((ts.tick, 0, vec![0xff, 0x58, 0x04, ts.numerator, power, 24, 8]));
    }
    for t in &score.tempo_map {
        let b = t.us_per_quarter.to_be_bytes();
        conductor.push((t.tick, 1, vec![0xff, 0x51, 0x03, b[1], b[2], b[3]]));
    }
    conductor.sort_by_key(|e| (e.0, e.1));
    let conductor: Vec<(u32, Vec<u8>)> = conductor.into_iter().map(|(t, _, b)| (t, b)).collect();
    push_chunk(&mut out, &conductor);

    let melodic_channels: Vec<u8> = (0..16u8).filter(|&c| c != DRUM_CHANNEL).collect();
    let mut melodic_index = 0usize;
    for track in &score.tracks {
        let (channel, program) = match track.program {
            Program::Drums => (DRUM_CHANNEL, 0),
            Program::Melodic(p) => {
                let ch = melodic_channels[melodic_index % melodic_channels.len()];
                melodic_index += 1;
                (ch, p)
            }
        };
        // (tick, order, pitch, bytes); order 0 = program, 1 = off, 2 = on
        let mut events: Vec<(u32, u8, u8, Vec<u8>)> = Vec::with_capacity(track.notes.len() * 2 + 1);
        events.push((0, 0, 0, vec![0xc0 | channel, program]));
        for n in &track.notes {
            events.push((n.onset, 2, n.pitch, vec![0x90 | channel, n.pitch, n.velocity]));
            events.push((n.offset(), 1, n.pitch, vec![0x80 | channel, n.pitch, 0]));
        }
        events.sort_by_key(|e| (e.0, e.1, e.2));
        let events: Vec<(u32, Vec<u8>)> = events.into_iter().map(|(t, _, _, b)| (t, b)).collect();
        push_chunk(&mut out, &events);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_note_file() -> Vec<u8> {
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xe0");
        let body: Vec<u8> = vec![
            0x00, 0x90, 60, 100, // note on
            0x83, 0x60, 0x80, 60, 0, // delta 480, note off
            0x00, 0xff, 0x2f, 0x00,
        ];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(body.len() as u32).to_be_bytes());
        f.extend_from_slice(&body);
        f
    }

    #[test]
    fn single_note_pairs_on_and_off() {
        let score = read_midi(&one_note_file()).unwrap();
        assert_eq!(score.ticks_per_quarter, 480);
        assert_eq!(score.tracks.len(), 1);
        assert_eq!(score.tracks[0].notes, vec![Note::new(60, 100, 0, 480)]);
        assert_eq!(score.tempo_map, vec![TempoChange { tick: 0, us_per_quarter: 500_000 }]);
        assert_eq!(score.timesig_map, vec![TimeSignature::new(0, 4, 4)]);
    }

    #[test]
    fn empty_track_chunk_gives_empty_track() {
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd\x00\x00\x00\x06\x00\x01\x00\x01\x00\x60");
        f.extend_from_slice(b"MTrk\x00\x00\x00\x04\x00\xff\x2f\x00");
        let score = read_midi(&f).unwrap();
        assert_eq!(score.tracks.len(), 1);
        assert!(score.tracks[0].notes.is_empty());
    }

    #[test]
    fn velocity_zero_note_on_is_note_off() {
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x00\x60");
        // running status: 90 3c 40, 60 3c 00
        let body = [0x00, 0x90, 0x3c, 0x40, 0x60, 0x3c, 0x00, 0x00, 0xff, 0x2f, 0x00];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(body.len() as u32).to_be_bytes());
        f.extend_from_slice(&body);
        let score = read_midi(&f).unwrap();
        assert_eq!(score.tracks[0].notes, vec![Note::new(60, 64, 0, 96)]);
    }

    #[test]
    fn dangling_note_is_closed_and_flagged() {
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x00\x60");
        let body = [0x00, 0x90, 0x3c, 0x40, 0x60, 0xff, 0x2f, 0x00];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(body.len() as u32).to_be_bytes());
        f.extend_from_slice(&body);
        let (score, report) = read_midi_with_report(&f).unwrap();
        assert_eq!(report.dangling_notes, 1);
        assert_eq!(score.tracks[0].notes, vec![Note::new(60, 64, 0, 96)]);
    }

    #[test]
    fn type_2_is_rejected() {
        let f = b"MThd\x00\x00\x00\x06\x00\x02\x00\x00\x00\x60";
        assert!(matches!(read_midi(f), Err(MidiError::Unsupported(_))));
    }

    #[test]
    fn truncated_chunk_reports_offset() {
        let mut f = one_note_file();
        f.truncate(f.len() - 3);
        match read_midi(&f) {
            Err(MidiError::Parse { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn overlapping_same_pitch_notes_merge_to_union() {
        let mut t = Track::new(Program::Melodic(0));
        t.notes = vec![Note::new(60, 90, 0, 20), Note::new(60, 50, 10, 20), Note::new(62, 50, 5, 5)];
        assert_eq!(t.normalize(), 1);
        assert_eq!(t.notes, vec![Note::new(60, 90, 0, 30), Note::new(62, 50, 5, 5)]);
    }

    #[test]
    fn bar_grid_examples() {
        let mut s = Score::new(480);
        let mut t = Track::new(Program::Melodic(0));
        t.notes.push(Note::new(60, 80, 0, 3840));
        s.tracks.push(t);
        assert_eq!(bar_grid(&s).unwrap(), vec![(0, 1920), (1920, 3840)]);

        s.timesig_map = vec![TimeSignature::new(0, 3, 4)];
        s.tracks[0].notes[0].duration = 2880;
        assert_eq!(bar_grid(&s).unwrap(), vec![(0, 1440), (1440, 2880)]);

        s.timesig_map = vec![TimeSignature::new(0, 4, 4), TimeSignature::new(1920, 3, 4)];
        s.tracks[0].notes[0].duration = 4800;
        assert_eq!(
            bar_grid(&s).unwrap(),
            vec![(0, 1920), (1920, 3360), (3360, 4800)]
        );
    }

    #[test]
    fn zero_denominator_is_validation_error() {
        let mut s = Score::new(480);
        s.timesig_map = vec![TimeSignature::new(0, 4, 0)];
        let mut t = Track::new(Program::Melodic(0));
        t.notes.push(Note::new(60, 80, 0, 100));
        s.tracks.push(t);
        assert!(matches!(bar_grid(&s), Err(MidiError::Validation(_))));
    }

    #[test]
    fn vlq_encoding() {
        for (v, bytes) in [
            (0u32, vec![0x00]),
            (0x7f, vec![0x7f]),
            (0x80, vec![0x81, 0x00]),
            (0x0fff_ffff, vec![0xff, 0xff, 0xff, 0x7f]),
        ] {
            let mut out = Vec::new();
            push_vlq(&mut out, v);
            assert_eq!(out, bytes);
            let mut c = Cursor { data: &out, pos: 0 };
            assert_eq!(c.vlq().unwrap(), v);
        }
    }
}
