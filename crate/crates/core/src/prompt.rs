//! Attribute controls and Bar-Fill prompts.
//!
//! A prompt concatenates every track of a bar window as
//! `Track_Start Program <bars> Track_End`, with the masked bars of the target
//! track each replaced by one `Infill_Bar`. The fill block follows:
//!
//! ```text
//! FillBar_Start <controls 1> <bar 1> Bar_None <controls 2> <bar 2> ... FillBar_End
//! ```
//!
//! The first fill bar has no leading `Bar_None`. At inference the prompt
//! stops after `FillBar_Start` and the controls of the first bar.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{bar_grid, MidiError, Note, Score, Track};
use crate::rng::Rng;
use crate::tokenizer::{
    decode_base, encode_track_bars, quantize_score, BaseToken, DecodeContext, DurClass, EncodeReport,
    TokenConfig, TokenizerError, Vocabulary, DENSITY_OVER,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("bar has no notes")]
    EmptyBar,
    #[error("invalid prompt spec: {0}")]
    Spec(String),
    #[error("no window of {n} non-empty bars in a track of {len} bars")]
    NoRegion { n: usize, len: usize },
    #[error("prompt of {len} tokens exceeds the budget of {budget} even without context")]
    Overflow { len: usize, budget: usize },
    #[error("malformed prompt at token {index}: {message}")]
    Grammar { index: usize, message: String },
    #[error("expected {expected} generated bars, got {got}")]
    BarCount { expected: usize, got: usize },
    #[error("score rejected: {0}")]
    Filtered(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Midi(#[from] MidiError),
}

/// Per-bar attribute controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeControls {
    /// Note count 1..=18, or [`DENSITY_OVER`] for more than 18.
    pub density: u8,
    /// Presence of whole, half, quarter, eighth and sixteenth notes.
    pub dur_flags: [bool; 5],
    pub poly_min: u8,
    pub poly_max: u8,
}

impl AttributeControls {
    /// Tokens in canonical order: density, five duration flags, polyphony
    /// minimum, polyphony maximum.
    pub fn tokens(&self) -> Vec<BaseToken> {
        let mut out = vec![BaseToken::Density(self.density)];
        for (c, &on) in DurClass::ALL.iter().zip(&self.dur_flags) {
            out.push(BaseToken::DurClass(*c, on));
        }
        out.push(BaseToken::PolyMin(self.poly_min));
        out.push(BaseToken::PolyMax(self.poly_max));
        out
    }

    pub const TOKEN_COUNT: usize = 8;

    /// Parses the canonical 8-token control group.
    pub fn from_tokens(tokens: &[BaseToken]) -> Option<Self> {
        if tokens.len() != Self::TOKEN_COUNT {
            return None;
        }
        let BaseToken::Density(density) = tokens[0] else { return None };
        let mut dur_flags = [false; 5];
        for (i, c) in DurClass::ALL.iter().enumerate() {
            match tokens[1 + i] {
                BaseToken::DurClass(k, on) if k == *c => dur_flags[i] = on,
                _ => return None,
            }
        }
        let (BaseToken::PolyMin(poly_min), BaseToken::PolyMax(poly_max)) = (tokens[6], tokens[7]) else {
            return None;
        };
        Some(Self {
            density,
            dur_flags,
            poly_min,
            poly_max,
        })
    }

    /// Midpoint of the requested density bin; the open bin counts as 18.
    pub fn density_target(&self) -> f64 {
        self.density.min(18) as f64
    }
}

/// A control group where each field may be left to be computed from the
/// original content.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlOverrides {
    #[serde(default)]
    pub density: Option<u8>,
    #[serde(default)]
    pub dur_flags: Option<[bool; 5]>,
    #[serde(default)]
    pub poly_min: Option<u8>,
    #[serde(default)]
    pub poly_max: Option<u8>,
}

impl ControlOverrides {
    /// Fills unset fields from `computed` and checks ranges.
    pub fn resolve(&self, computed: Option<AttributeControls>, cfg: &TokenConfig) -> Result<AttributeControls, PromptError> {
        let need = |what: &str| PromptError::Spec(format!("{what} must be given for an empty bar"));
        let c = AttributeControls {
            density: match self.density {
                Some(d) => d,
                None => computed.ok_or_else(|| need("density"))?.density,
            },
            dur_flags: match self.dur_flags {
                Some(f) => f,
                None => computed.ok_or_else(|| need("dur_flags"))?.dur_flags,
            },
            poly_min: match self.poly_min {
                Some(p) => p,
                None => computed.ok_or_else(|| need("poly_min"))?.poly_min,
            },
            poly_max: match self.poly_max {
                Some(p) => p,
                None => computed.ok_or_else(|| need("poly_max"))?.poly_max,
            },
        };
        check_controls(&c, cfg)?;
        Ok(c)
    }
}

pub fn check_controls(c: &AttributeControls, cfg: &TokenConfig) -> Result<(), PromptError> {
    if !(1..=DENSITY_OVER).contains(&c.density) {
        return Err(PromptError::Spec(format!("density {} outside 1..={DENSITY_OVER}", c.density)));
    }
    if c.poly_min < 1 || c.poly_max > cfg.max_polyphony || c.poly_min > c.poly_max {
        return Err(PromptError::Spec(format!(
            "polyphony bounds {}..{} invalid (1 ≤ min ≤ max ≤ {})",
            c.poly_min, c.poly_max, cfg.max_polyphony
        )));
    }
    Ok(())
}

/// Nearest duration class in grid units; ties go to the shorter class.
pub fn duration_class(duration_ticks: u32, tpq: u16, cfg: &TokenConfig) -> DurClass {
    let ppq = cfg.positions_per_quarter as f64;
    let units = (duration_ticks as f64 * ppq / tpq as f64).round();
    let mut best = DurClass::Sixteenth;
    let mut best_d = f64::INFINITY;
    // shortest first so that ties keep the shorter class
    for c in DurClass::ALL.iter().rev() {
        let d = (units - c.quarters() * ppq).abs();
        if d < best_d {
            best = *c;
            best_d = d;
        }
    }
    best
}

/// Controls realised by the notes of one bar.
pub fn compute_controls(notes: &[Note], tpq: u16, cfg: &TokenConfig) -> Result<AttributeControls, PromptError> {
    if notes.is_empty() {
        return Err(PromptError::EmptyBar);
    }
    let density = if notes.len() > 18 { DENSITY_OVER } else { notes.len() as u8 };
    let mut dur_flags = [false; 5];
    for n in notes {
        dur_flags[duration_class(n.duration, tpq, cfg).index()] = true;
    }
    let mut onsets: Vec<u32> = notes.iter().map(|n| n.onset).collect();
    onsets.sort_unstable();
    onsets.dedup();
    let mut lo = usize::MAX;
    let mut hi = 0;
    for &t in &onsets {
        let sounding = notes.iter().filter(|n| n.onset <= t && t < n.offset()).count();
        lo = lo.min(sounding);
        hi = hi.max(sounding);
    }
    let cap = cfg.max_polyphony as usize;
    Ok(AttributeControls {
        density,
        dur_flags,
        poly_min: lo.clamp(1, cap) as u8,
        poly_max: hi.clamp(1, cap) as u8,
    })
}

/// Notes of `track` with onsets inside `bar`.
pub fn bar_notes(track: &Track, bar: (u32, u32)) -> Vec<Note> {
    track
        .notes
        .iter()
        .filter(|n| n.onset >= bar.0 && n.onset < bar.1)
        .copied()
        .collect()
}

/// `max(choice, floor(u·len))` capped to `len`, with `u` in [0.1, 0.4).
pub fn region_length(len: usize, choice: usize, u: f64) -> usize {
    choice.max((u * len as f64).floor() as usize).clamp(1, len.max(1))
}

pub const REGION_CHOICES: [usize; 4] = [1, 2, 4, 8];
const REGION_TRIES: usize = 32;

/// Draws an infill length for a track of `len` bars.
pub fn select_infill_length(len: usize, rng: &mut Rng) -> usize {
    let choice = REGION_CHOICES[rng.gen_range(0..REGION_CHOICES.len())];
    let u = 0.1 + 0.3 * rng.gen::<f64>();
    region_length(len, choice, u)
}

/// Draws `(start, n)` such that bars `start..start+n` are all non-empty,
/// resampling the start up to 32 times.
pub fn select_infill_region(nonempty: &[bool], rng: &mut Rng) -> Result<(usize, usize), PromptError> {
    let len = nonempty.len();
    if len == 0 {
        return Err(PromptError::NoRegion { n: 1, len });
    }
    let n = select_infill_length(len, rng);
    for _ in 0..REGION_TRIES {
        let start = rng.gen_range(0..=len - n);
        if nonempty[start..start + n].iter().all(|&b| b) {
            return Ok((start, n));
        }
    }
    Err(PromptError::NoRegion { n, len })
}

/// An infilling task on a score.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub track: usize,
    pub start_bar: usize,
    pub n_bars: usize,
    pub context: usize,
    pub controls: Vec<AttributeControls>,
    pub track_order: Vec<usize>,
}

impl PromptSpec {
    pub fn region(&self) -> Range<usize> {
        self.start_bar..self.start_bar + self.n_bars
    }

    /// Bars included in the prompt for a score of `len` bars.
    pub fn window(&self, len: usize) -> Range<usize> {
        self.start_bar.saturating_sub(self.context)..(self.start_bar + self.n_bars + self.context).min(len)
    }

    pub fn validate(&self, score: &Score, bars: usize) -> Result<(), PromptError> {
        let k = score.tracks.len();
        let bad = |m: String| Err(PromptError::Spec(m));
        if self.track >= k {
            return bad(format!("track {} of {k}", self.track));
        }
        if self.n_bars == 0 || self.start_bar + self.n_bars > bars {
            return bad(format!(
                "bars {}..{} outside a score of {bars} bars",
                self.start_bar,
                self.start_bar + self.n_bars
            ));
        }
        if self.controls.len() != self.n_bars {
            return bad(format!("{} control groups for {} bars", self.controls.len(), self.n_bars));
        }
        let mut seen = vec![false; k];
        for &t in &self.track_order {
            if t >= k || std::mem::replace(&mut seen[t], true) {
                return bad("track_order is not a permutation of the tracks".into());
            }
        }
        if self.track_order.len() != k {
            return bad("track_order is not a permutation of the tracks".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub ids: Vec<u32>,
    /// Index of `FillBar_Start`.
    pub fill_start: usize,
    /// Index of `FillBar_End`; `None` for inference prompts.
    pub fill_end: Option<usize>,
    pub window: Range<usize>,
}

/// Serializes `spec` against `score`. Tokens are BPE-merged with `vocab`.
pub fn build_prompt(score: &Score, spec: &PromptSpec, mode: Mode, vocab: &Vocabulary) -> Result<Prompt, PromptError> {
    let grid = bar_grid(score)?;
    build_prompt_on_grid(score, &grid, spec, mode, vocab)
}

fn build_prompt_on_grid(
    score: &Score,
    grid: &[(u32, u32)],
    spec: &PromptSpec,
    mode: Mode,
    vocab: &Vocabulary,
) -> Result<Prompt, PromptError> {
    spec.validate(score, grid.len())?;
    for c in &spec.controls {
        check_controls(c, vocab.base().config())?;
    }
    let window = spec.window(grid.len());
    let region = spec.region();
    let mut report = EncodeReport::default();
    let mut tokens = Vec::new();
    let mut masked = Vec::new();
    for &t in &spec.track_order {
        let bars = encode_track_bars(score, t, grid, window.clone(), vocab.base(), &mut report)?;
        tokens.push(BaseToken::TrackStart);
        tokens.push(BaseToken::Program(score.tracks[t].program));
        for (k, bar) in bars.into_iter().enumerate() {
            let b = window.start + k;
            if t == spec.track && region.contains(&b) {
                tokens.push(BaseToken::InfillBar);
                masked.push(bar);
            } else {
                tokens.extend(bar);
            }
        }
        tokens.push(BaseToken::TrackEnd);
    }
    tokens.push(BaseToken::FillBarStart);
    match mode {
        Mode::Train => {
            for (i, bar) in masked.iter().enumerate() {
                if i > 0 {
                    tokens.push(BaseToken::BarNone);
                }
                tokens.extend(spec.controls[i].tokens());
                tokens.extend_from_slice(&bar[1..]);
            }
            tokens.push(BaseToken::FillBarEnd);
        }
        Mode::Infer => tokens.extend(spec.controls[0].tokens()),
    }
    let ids = vocab.apply(&vocab.base().encode(&tokens)?)?;
    let start_id = vocab.must(BaseToken::FillBarStart);
    let fill_start = ids.iter().rposition(|&i| i == start_id).expect("fill block present");
    let fill_end = match mode {
        Mode::Train => Some(ids.len() - 1),
        Mode::Infer => None,
    };
    Ok(Prompt {
        ids,
        fill_start,
        fill_end,
        window,
    })
}

/// Largest context `C` whose training prompt fits in `budget` tokens,
/// scanning upward from 0 and stopping at the first `C` for which `C + 1`
/// overflows. `C` stops growing once the window covers the whole score.
pub fn select_context(score: &Score, spec: &PromptSpec, budget: usize, vocab: &Vocabulary) -> Result<usize, PromptError> {
    let grid = bar_grid(score)?;
    let max_c = spec.start_bar.max(grid.len().saturating_sub(spec.start_bar + spec.n_bars));
    let len_at = |c: usize| -> Result<usize, PromptError> {
        let s = PromptSpec { context: c, ..spec.clone() };
        Ok(build_prompt_on_grid(score, &grid, &s, Mode::Train, vocab)?.ids.len())
    };
    let len0 = len_at(0)?;
    if len0 > budget {
        return Err(PromptError::Overflow { len: len0, budget });
    }
    let mut c = 0;
    while c < max_c && len_at(c + 1)? <= budget {
        c += 1;
    }
    Ok(c)
}

/// Corpus admission thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusFilter {
    pub min_bars: usize,
    pub min_notes: usize,
}

impl Default for CorpusFilter {
    fn default() -> Self {
        Self {
            min_bars: 8,
            min_notes: 100,
        }
    }
}

impl CorpusFilter {
    pub fn check(&self, score: &Score) -> Result<(), PromptError> {
        let bars = bar_grid(score)?.len();
        let notes = score.note_count();
        if bars < self.min_bars || notes < self.min_notes {
            return Err(PromptError::Filtered(format!(
                "{bars} bars and {notes} notes (need {} and {})",
                self.min_bars, self.min_notes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub ids: Vec<u32>,
    pub fill_start: usize,
    pub fill_end: usize,
    pub spec: PromptSpec,
    /// Octave shift applied to melodic tracks.
    pub transpose: i8,
}

impl TrainingExample {
    /// Marks the tokens after `FillBar_Start` up to and including
    /// `FillBar_End` as prediction targets.
    pub fn target_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|t| t > self.fill_start && t <= self.fill_end).collect()
    }
}

/// Octave shifts in `-6..=6` keeping every melodic note inside the pitch
/// range. Zero is always allowed.
pub fn feasible_octave_shifts(score: &Score, cfg: &TokenConfig) -> Vec<i8> {
    let melodic = score.tracks.iter().filter(|t| !t.program.is_drums()).flat_map(|t| &t.notes);
    let (lo, hi) = melodic.fold((u8::MAX, 0u8), |(lo, hi), n| (lo.min(n.pitch), hi.max(n.pitch)));
    (-6i8..=6)
        .filter(|&s| {
            s == 0
                || lo > hi
                || (lo as i32 + 12 * s as i32 >= cfg.pitch_min as i32 && hi as i32 + 12 * s as i32 <= cfg.pitch_max as i32)
        })
        .collect()
}

pub fn transpose_octaves(score: &Score, octaves: i8) -> Score {
    let mut out = score.clone();
    for t in out.tracks.iter_mut().filter(|t| !t.program.is_drums()) {
        for n in &mut t.notes {
            n.pitch = (n.pitch as i32 + 12 * octaves as i32).clamp(0, 127) as u8;
        }
    }
    out
}

/// Full training-example synthesis for one file: random octave shift
/// (resampled until every pitch stays in range), random track order, random
/// region on a random non-empty track, computed controls and maximal context.
pub fn make_training_example(
    score: &Score,
    rng: &mut Rng,
    budget: usize,
    vocab: &Vocabulary,
) -> Result<TrainingExample, PromptError> {
    let cfg = vocab.base().config();
    let shifts = feasible_octave_shifts(score, cfg);
    // Drawing from the feasible set is rejection sampling with the rejections
    // skipped: every feasible shift stays equally likely.
    let transpose = shifts[rng.gen_range(0..shifts.len())];
    let shifted = transpose_octaves(score, transpose);
    let q = quantize_score(&shifted, vocab.base())?;
    let grid = bar_grid(&q)?;
    let mut order: Vec<usize> = (0..q.tracks.len()).collect();
    order.shuffle(rng);
    let candidates: Vec<usize> = (0..q.tracks.len()).filter(|&t| !q.tracks[t].notes.is_empty()).collect();
    let &track = candidates
        .choose(rng)
        .ok_or_else(|| PromptError::Filtered("no track has notes".into()))?;
    let bar_contents: Vec<Vec<Note>> = grid.iter().map(|&b| bar_notes(&q.tracks[track], b)).collect();
    let nonempty: Vec<bool> = bar_contents.iter().map(|b| !b.is_empty()).collect();
    let (start_bar, n_bars) = select_infill_region(&nonempty, rng)?;
    let controls = bar_contents[start_bar..start_bar + n_bars]
        .iter()
        .map(|notes| compute_controls(notes, q.ticks_per_quarter, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut spec = PromptSpec {
        track,
        start_bar,
        n_bars,
        context: 0,
        controls,
        track_order: order,
    };
    spec.context = select_context(&q, &spec, budget, vocab)?;
    let prompt = build_prompt_on_grid(&q, &grid, &spec, Mode::Train, vocab)?;
    Ok(TrainingExample {
        fill_end: prompt.fill_end.unwrap(),
        fill_start: prompt.fill_start,
        ids: prompt.ids,
        spec,
        transpose,
    })
}

/// Decode context for fill-block content of `spec` in `score`.
pub fn fill_context(score: &Score, grid: &[(u32, u32)], spec: &PromptSpec, cfg: &TokenConfig) -> DecodeContext {
    let start = grid[spec.start_bar].0;
    let ts = score.timesig_at(start);
    DecodeContext {
        ticks_per_quarter: score.ticks_per_quarter,
        start_tick: start,
        timesig: (ts.numerator, ts.denominator),
        tempo_bin: Some(cfg.tempo_bin(score.tempo_at(start).bpm())),
        implicit_first_bar: true,
    }
}

/// Replaces the region of `spec.track` with the notes decoded from
/// `generated`: the fill-block tokens after `FillBar_Start` (controls
/// included, trailing `FillBar_End` optional). Generated notes that ring past
/// the next onset of the same pitch are cut there.
pub fn splice_back(score: &Score, spec: &PromptSpec, generated: &[u32], vocab: &Vocabulary) -> Result<Score, PromptError> {
    let grid = bar_grid(score)?;
    spec.validate(score, grid.len())?;
    let mut base = vocab.invert(generated)?;
    if base.last() == Some(&vocab.must(BaseToken::FillBarEnd)) {
        base.pop();
    }
    let ctx = fill_context(score, &grid, spec, vocab.base().config());
    let frag = decode_base(&base, vocab.base(), ctx)?;
    if frag.bars.len() != spec.n_bars {
        return Err(PromptError::BarCount {
            expected: spec.n_bars,
            got: frag.bars.len(),
        });
    }
    let lo = grid[spec.start_bar].0;
    let hi = grid[spec.start_bar + spec.n_bars - 1].1;
    let mut out = score.clone();
    let track = &mut out.tracks[spec.track];
    let kept: Vec<Note> = track.notes.iter().filter(|n| n.onset < lo || n.onset >= hi).copied().collect();
    let mut notes = kept.clone();
    for mut g in frag.notes {
        if g.onset >= hi {
            continue;
        }
        let next_same = kept
            .iter()
            .chain(notes.iter())
            .filter(|n| n.pitch == g.pitch && n.onset > g.onset)
            .map(|n| n.onset)
            .min();
        if let Some(t) = next_same {
            g.duration = g.duration.min(t - g.onset);
        }
        notes.push(g);
    }
    track.notes = notes;
    track.normalize();
    Ok(out)
}

/// Structure of a checked prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSummary {
    pub tracks: usize,
    pub infill_bars: usize,
    pub fill_bars: usize,
    pub fill_controls: Vec<AttributeControls>,
    pub complete: bool,
}

/// Checks the Bar-Fill grammar of a prompt (BPE ids): tracks, exactly one
/// contiguous run of `Infill_Bar` in one track, a fill block whose every bar
/// opens with a full control group, and grammatical bar content.
pub fn validate_prompt(ids: &[u32], vocab: &Vocabulary) -> Result<PromptSummary, PromptError> {
    let base = vocab.invert(ids)?;
    let toks = vocab.base().decode(&base)?;
    let err = |index: usize, message: &str| PromptError::Grammar {
        index,
        message: message.to_string(),
    };
    let mut i = 0;
    let mut tracks = 0;
    let mut infill_bars = 0;
    let mut infill_tracks = 0;
    let ctx = DecodeContext::new(480);
    while i < toks.len() && toks[i] == BaseToken::TrackStart {
        let body_start = i + 1;
        let end = toks[body_start..]
            .iter()
            .position(|t| *t == BaseToken::TrackEnd)
            .map(|p| body_start + p)
            .ok_or_else(|| err(i, "Track_Start without Track_End"))?;
        if !matches!(toks.get(body_start), Some(BaseToken::Program(_))) {
            return Err(err(body_start, "track must open with a Program token"));
        }
        let body = &toks[body_start + 1..end];
        let holes: Vec<usize> = body
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == BaseToken::InfillBar)
            .map(|(k, _)| k)
            .collect();
        if !holes.is_empty() {
            infill_tracks += 1;
            if holes.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(err(body_start + 1 + holes[0], "Infill_Bar tokens are not contiguous"));
            }
            infill_bars += holes.len();
        }
        let mut content = Vec::new();
        for (k, t) in body.iter().enumerate() {
            if t.is_structural() && *t != BaseToken::BarNone && *t != BaseToken::InfillBar {
                return Err(err(body_start + 1 + k, "unexpected structural token inside a track"));
            }
            if t.is_control() {
                return Err(err(body_start + 1 + k, "control token inside a track"));
            }
            if *t != BaseToken::InfillBar {
                content.push(vocab.base().must(*t));
            }
        }
        decode_base(&content, vocab.base(), ctx).map_err(|e| match e {
            TokenizerError::Decode { message, .. } => err(body_start + 1, &message),
            other => PromptError::Tokenizer(other),
        })?;
        tracks += 1;
        i = end + 1;
    }
    if tracks == 0 {
        return Err(err(0, "prompt must start with a track"));
    }
    if infill_tracks != 1 {
        return Err(err(0, "exactly one track must contain Infill_Bar tokens"));
    }
    if toks.get(i) != Some(&BaseToken::FillBarStart) {
        return Err(err(i, "expected FillBar_Start after the tracks"));
    }
    i += 1;
    let mut fill_controls = Vec::new();
    let mut content = Vec::new();
    let mut complete = false;
    let mut expect_controls = true;
    while i < toks.len() {
        let t = toks[i];
        if expect_controls {
            let group = toks.get(i..i + AttributeControls::TOKEN_COUNT).unwrap_or(&[]);
            let c = AttributeControls::from_tokens(group).ok_or_else(|| err(i, "bar must open with a full control group"))?;
            fill_controls.push(c);
            i += AttributeControls::TOKEN_COUNT;
            expect_controls = false;
            continue;
        }
        match t {
            BaseToken::FillBarEnd => {
                if i + 1 != toks.len() {
                    return Err(err(i + 1, "tokens after FillBar_End"));
                }
                complete = true;
            }
            BaseToken::BarNone => {
                content.push(vocab.base().must(t));
                expect_controls = true;
            }
            t if t.is_structural() || t.is_control() => return Err(err(i, "unexpected token in the fill block")),
            t => content.push(vocab.base().must(t)),
        }
        i += 1;
    }
    if fill_controls.is_empty() {
        return Err(err(i, "fill block has no controls"));
    }
    if expect_controls && complete {
        return Err(err(i, "Bar_None right before FillBar_End"));
    }
    let fill_ctx = DecodeContext {
        implicit_first_bar: true,
        ..ctx
    };
    decode_base(&content, vocab.base(), fill_ctx).map_err(|e| match e {
        TokenizerError::Decode { message, .. } => err(i, &message),
        other => PromptError::Tokenizer(other),
    })?;
    let fill_bars = fill_controls.len();
    if complete && fill_bars != infill_bars {
        return Err(err(i, "fill block bar count differs from the Infill_Bar count"));
    }
    Ok(PromptSummary {
        tracks,
        infill_bars,
        fill_bars,
        fill_controls,
        complete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::Program;
    use crate::rng::seeded;
    use crate::tokenizer::BaseVocab;

    fn cfg() -> TokenConfig {
        TokenConfig::default()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(BaseVocab::new(cfg()))
    }

    fn q(n: u32) -> Note {
        Note::new(60, 100, n * 480, 480)
    }

    #[test]
    fn density_over_bin() {
        let notes: Vec<Note> = (0..25).map(|i| Note::new(60 + (i % 5) as u8, 90, i * 60, 60)).collect();
        assert_eq!(compute_controls(&notes, 480, &cfg()).unwrap().density, DENSITY_OVER);
        let notes: Vec<Note> = (0..18).map(|i| Note::new(60, 90, i * 60, 60)).collect();
        assert_eq!(compute_controls(&notes, 480, &cfg()).unwrap().density, 18);
    }

    #[test]
    fn lone_quarter_note() {
        let c = compute_controls(&[q(0)], 480, &cfg()).unwrap();
        assert_eq!(c.density, 1);
        assert_eq!(c.dur_flags, [false, false, true, false, false]);
        assert_eq!((c.poly_min, c.poly_max), (1, 1));
    }

    #[test]
    fn chord_plus_single() {
        let notes = [
            Note::new(60, 90, 0, 480),
            Note::new(64, 90, 0, 480),
            Note::new(67, 90, 0, 480),
            Note::new(72, 90, 960, 480),
        ];
        let c = compute_controls(&notes, 480, &cfg()).unwrap();
        assert_eq!((c.poly_min, c.poly_max), (1, 3));
    }

    #[test]
    fn empty_bar_has_no_controls() {
        assert_eq!(compute_controls(&[], 480, &cfg()), Err(PromptError::EmptyBar));
    }

    #[test]
    fn duration_class_ties_go_short() {
        // 3 sixteenths = 6 units, halfway between eighth (4) and quarter (8)
        assert_eq!(duration_class(360, 480, &cfg()), DurClass::Eighth);
        assert_eq!(duration_class(720, 480, &cfg()), DurClass::Quarter);
        assert_eq!(duration_class(30, 480, &cfg()), DurClass::Sixteenth);
        assert_eq!(duration_class(480 * 12, 480, &cfg()), DurClass::Whole);
    }

    #[test]
    fn controls_token_round_trip() {
        let c = AttributeControls {
            density: 7,
            dur_flags: [true, false, true, false, true],
            poly_min: 1,
            poly_max: 4,
        };
        assert_eq!(AttributeControls::from_tokens(&c.tokens()), Some(c));
        assert_eq!(AttributeControls::from_tokens(&c.tokens()[1..]), None);
    }

    #[test]
    fn region_length_formula() {
        assert_eq!(region_length(40, 2, 0.25), 10);
        assert_eq!(region_length(8, 8, 0.1), 8);
        assert_eq!(region_length(5, 8, 0.1), 5);
    }

    #[test]
    fn overrides_fill_from_computed() {
        let computed = compute_controls(&[q(0)], 480, &cfg()).unwrap();
        let o = ControlOverrides {
            density: Some(5),
            ..Default::default()
        };
        let c = o.resolve(Some(computed), &cfg()).unwrap();
        assert_eq!(c.density, 5);
        assert_eq!(c.dur_flags, computed.dur_flags);
        assert!(ControlOverrides::default().resolve(None, &cfg()).is_err());
        let bad = ControlOverrides {
            poly_min: Some(3),
            poly_max: Some(2),
            ..Default::default()
        };
        assert!(bad.resolve(Some(computed), &cfg()).is_err());
    }

    fn three_bar_score() -> Score {
        let mut s = Score::new(480);
        let mut t = Track::new(Program::Melodic(30));
        for bar in 0..3u32 {
            t.notes.push(Note::new(55 + bar as u8, 99, bar * 1920, 480));
        }
        s.tracks.push(t);
        s
    }

    #[test]
    fn single_track_prompt_layout() {
        let s = three_bar_score();
        let v = vocab();
        let c = compute_controls(&[Note::new(56, 99, 1920, 480)], 480, &cfg()).unwrap();
        let spec = PromptSpec {
            track: 0,
            start_bar: 1,
            n_bars: 1,
            context: 1,
            controls: vec![c],
            track_order: vec![0],
        };
        let p = build_prompt(&s, &spec, Mode::Train, &v).unwrap();
        let toks = v.base().decode(&v.invert(&p.ids).unwrap()).unwrap();
        use BaseToken::*;
        let bin = cfg().tempo_bin(120.0);
        let mut expect = vec![
            TrackStart,
            Program(crate::midi::Program::Melodic(30)),
            BarNone,
            TimeSig(4, 4),
            Position(0),
            Tempo(bin),
            Pitch(55),
            Velocity(99),
            Duration(8),
            InfillBar,
            BarNone,
            Position(0),
            Pitch(57),
            Velocity(99),
            Duration(8),
            TrackEnd,
            FillBarStart,
        ];
        expect.extend(c.tokens());
        expect.extend([Position(0), Pitch(56), Velocity(99), Duration(8), FillBarEnd]);
        assert_eq!(toks, expect);
        let summary = validate_prompt(&p.ids, &v).unwrap();
        assert_eq!((summary.infill_bars, summary.fill_bars, summary.complete), (1, 1, true));

        let infer = build_prompt(&s, &spec, Mode::Infer, &v).unwrap();
        assert_eq!(infer.ids[..], p.ids[..p.fill_start + 1 + AttributeControls::TOKEN_COUNT]);
        assert!(!validate_prompt(&infer.ids, &v).unwrap().complete);
    }

    #[test]
    fn splice_identity_and_replacement() {
        let s = three_bar_score();
        let v = vocab();
        let c = compute_controls(&[Note::new(56, 99, 1920, 480)], 480, &cfg()).unwrap();
        let spec = PromptSpec {
            track: 0,
            start_bar: 1,
            n_bars: 1,
            context: 1,
            controls: vec![c],
            track_order: vec![0],
        };
        let p = build_prompt(&s, &spec, Mode::Train, &v).unwrap();
        let fill = &p.ids[p.fill_start + 1..];
        assert_eq!(splice_back(&s, &spec, fill, &v).unwrap(), s);

        let mut gen = c.tokens();
        gen.extend([BaseToken::Position(8), BaseToken::Pitch(70), BaseToken::Velocity(99), BaseToken::Duration(4)]);
        let ids = v.base().encode(&gen).unwrap();
        let out = splice_back(&s, &spec, &ids, &v).unwrap();
        assert_eq!(out.tracks[0].notes[1], Note::new(70, 99, 1920 + 480, 240));
        assert_eq!(out.tracks[0].notes[0], s.tracks[0].notes[0]);
        assert_eq!(out.tracks[0].notes[2], s.tracks[0].notes[2]);

        let two_bars = v.base().encode(&[BaseToken::BarNone]).unwrap();
        let mut bad = ids.clone();
        bad.extend(two_bars);
        assert!(matches!(splice_back(&s, &spec, &bad, &v), Err(PromptError::BarCount { .. })));
    }

    #[test]
    fn context_edge_clipping() {
        let mut s = three_bar_score();
        s.tracks[0].notes.push(Note::new(60, 99, 3 * 1920, 480));
        let v = vocab();
        let c = compute_controls(&[q(0)], 480, &cfg()).unwrap();
        let spec = PromptSpec {
            track: 0,
            start_bar: 0,
            n_bars: 1,
            context: 0,
            controls: vec![c],
            track_order: vec![0],
        };
        assert_eq!(select_context(&s, &spec, 10_000, &v).unwrap(), 3);
        assert_eq!(spec.window(4), 0..1);
        assert!(matches!(select_context(&s, &spec, 5, &v), Err(PromptError::Overflow { .. })));
    }

    #[test]
    fn transposition_stays_in_range() {
        let mut s = Score::new(480);
        let mut t = Track::new(Program::Melodic(0));
        t.notes.push(Note::new(30, 90, 0, 480));
        s.tracks.push(t);
        let mut d = Track::new(Program::Drums);
        d.notes.push(Note::new(36, 90, 0, 480));
        s.tracks.push(d);
        let shifts = feasible_octave_shifts(&s, &cfg());
        assert!(!shifts.contains(&-1));
        assert!(shifts.contains(&0) && shifts.contains(&6));
        let up = transpose_octaves(&s, 2);
        assert_eq!(up.tracks[0].notes[0].pitch, 54);
        assert_eq!(up.tracks[1].notes[0].pitch, 36);
    }

    #[test]
    fn region_avoids_empty_bars() {
        let mut nonempty = vec![true; 20];
        nonempty[3] = false;
        let mut rng = seeded(1);
        for _ in 0..200 {
            if let Ok((s, n)) = select_infill_region(&nonempty, &mut rng) {
                assert!(!(s..s + n).contains(&3));
            }
        }
        assert!(select_infill_region(&[false; 10], &mut rng).is_err());
    }
}
