//! REMI tokenization and byte-pair encoding over REMI ids.
//!
//! The base vocabulary is laid out from a [`TokenConfig`]; its size is a
//! function of the configured bins and is reported by [`BaseVocab::len`].
//! Structural tokens (bar and track delimiters, infill markers, programs)
//! and attribute-control tokens are never merged by BPE, so downstream code
//! can locate bar boundaries and inject controls in BPE space.

mod bpe;
mod io;
mod remi;

pub use bpe::{train_bpe, BpeReport, Vocabulary};
pub use io::{read_sequences, write_sequence, SEQUENCE_MAGIC};
pub use remi::{
    decode_base, decode_score, encode_base, encode_track_bars, quantize_score, BarTokens,
    DecodeContext, DecodedFragment, EncodeReport,
};

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{MidiError, Program};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizerError {
    #[error("token id {id} outside vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("ungrammatical token stream at index {index}: {message}")]
    Decode { index: usize, message: String },
    #[error("cannot encode: {0}")]
    Unsupported(String),
    #[error("invalid vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Midi(#[from] MidiError),
}

/// The five note-length classes used by the duration attribute control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DurClass {
    Whole,
    Half,
    Quarter,
    Eighth,
    Sixteenth,
}

impl DurClass {
    pub const ALL: [DurClass; 5] = [
        DurClass::Whole,
        DurClass::Half,
        DurClass::Quarter,
        DurClass::Eighth,
        DurClass::Sixteenth,
    ];

    /// Length in quarter notes.
    pub fn quarters(self) -> f64 {
        match self {
            DurClass::Whole => 4.0,
            DurClass::Half => 2.0,
            DurClass::Quarter => 1.0,
            DurClass::Eighth => 0.5,
            DurClass::Sixteenth => 0.25,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Density value standing for "more than 18 notes".
pub const DENSITY_OVER: u8 = 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseToken {
    Pad,
    BarNone,
    TrackStart,
    TrackEnd,
    FillBarStart,
    FillBarEnd,
    InfillBar,
    Program(Program),
    /// Grid position inside the bar.
    Position(u16),
    Pitch(u8),
    /// Representative velocity of the bin.
    Velocity(u8),
    /// Length in grid units.
    Duration(u16),
    /// Tempo bin index.
    Tempo(u8),
    TimeSig(u8, u8),
    /// Note count 1..=18, or [`DENSITY_OVER`].
    Density(u8),
    DurClass(DurClass, bool),
    PolyMin(u8),
    PolyMax(u8),
}

impl BaseToken {
    /// Delimiters, infill markers and programs.
    pub fn is_structural(&self) -> bool {
        matches!(
            self,
            BaseToken::Pad
                | BaseToken::BarNone
                | BaseToken::TrackStart
                | BaseToken::TrackEnd
                | BaseToken::FillBarStart
                | BaseToken::FillBarEnd
                | BaseToken::InfillBar
                | BaseToken::Program(_)
        )
    }

    pub fn is_control(&self) -> bool {
        matches!(
            self,
            BaseToken::Density(_) | BaseToken::DurClass(..) | BaseToken::PolyMin(_) | BaseToken::PolyMax(_)
        )
    }

    pub fn is_mergeable(&self) -> bool {
        !self.is_structural() && !self.is_control()
    }
}

impl fmt::Display for BaseToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseToken::Pad => write!(f, "PAD_None"),
            BaseToken::BarNone => write!(f, "Bar_None"),
            BaseToken::TrackStart => write!(f, "Track_Start"),
            BaseToken::TrackEnd => write!(f, "Track_End"),
            BaseToken::FillBarStart => write!(f, "FillBar_Start"),
            BaseToken::FillBarEnd => write!(f, "FillBar_End"),
            BaseToken::InfillBar => write!(f, "Infill_Bar"),
            BaseToken::Program(Program::Melodic(p)) => write!(f, "Program_{p}"),
            BaseToken::Program(Program::Drums) => write!(f, "Program_-1"),
            BaseToken::Position(p) => write!(f, "Position_{p}"),
            BaseToken::Pitch(p) => write!(f, "Pitch_{p}"),
            BaseToken::Velocity(v) => write!(f, "Velocity_{v}"),
            BaseToken::Duration(d) => write!(f, "Duration_{d}"),
            BaseToken::Tempo(b) => write!(f, "Tempo_{b}"),
            BaseToken::TimeSig(n, d) => write!(f, "TimeSig_{n}/{d}"),
            BaseToken::Density(d) if *d == DENSITY_OVER => write!(f, "ACBarNoteDensity_18+"),
            BaseToken::Density(d) => write!(f, "ACBarNoteDensity_{d}"),
            BaseToken::DurClass(c, on) => write!(f, "ACBarNoteDuration{c:?}_{}", *on as u8),
            BaseToken::PolyMin(p) => write!(f, "ACBarPolyphonyMin_{p}"),
            BaseToken::PolyMax(p) => write!(f, "ACBarPolyphonyMax_{p}"),
        }
    }
}

/// Bin layout of the base vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenConfig {
    pub pitch_min: u8,
    pub pitch_max: u8,
    pub positions_per_quarter: u16,
    pub velocity_bins: u8,
    /// Longest representable duration, in 4/4 bars.
    pub max_duration_bars: u16,
    pub tempo_bins: u8,
    pub tempo_min_bpm: f64,
    pub tempo_max_bpm: f64,
    /// Longest supported bar, in quarter notes.
    pub max_bar_quarters: u16,
    pub max_polyphony: u8,
}

impl Default for TokenConfig {
    fn default() -> Self {
        Self {
            pitch_min: 21,
            pitch_max: 108,
            positions_per_quarter: 8,
            velocity_bins: 32,
            max_duration_bars: 4,
            tempo_bins: 32,
            tempo_min_bpm: 40.0,
            tempo_max_bpm: 250.0,
            max_bar_quarters: 8,
            max_polyphony: 16,
        }
    }
}

impl TokenConfig {
    pub fn max_duration_units(&self) -> u16 {
        self.max_duration_bars * 4 * self.positions_per_quarter
    }

    pub fn max_positions(&self) -> u16 {
        self.max_bar_quarters * self.positions_per_quarter
    }

    pub fn velocity_values(&self) -> Vec<u8> {
        let bins = self.velocity_bins as f64;
        (0..self.velocity_bins)
            .map(|i| ((i as f64 + 1.0) * 127.0 / bins).round().max(1.0) as u8)
            .collect()
    }

    pub fn quantize_velocity(&self, velocity: u8) -> u8 {
        nearest(&self.velocity_values(), |v| (v as f64 - velocity as f64).abs())
    }

    pub fn tempo_values(&self) -> Vec<f64> {
        let n = self.tempo_bins as f64;
        let ratio = self.tempo_max_bpm / self.tempo_min_bpm;
        (0..self.tempo_bins)
            .map(|i| {
                let frac = if n > 1.0 { i as f64 / (n - 1.0) } else { 0.0 };
                self.tempo_min_bpm * ratio.powf(frac)
            })
            .collect()
    }

    pub fn tempo_bin(&self, bpm: f64) -> u8 {
        let values = self.tempo_values();
        let idx: Vec<u8> = (0..self.tempo_bins).collect();
        nearest(&idx, |i| (values[i as usize].ln() - bpm.ln()).abs())
    }

    pub fn time_signatures(&self) -> Vec<(u8, u8)> {
        let mut out = Vec::new();
        for den in [2u8, 4, 8, 16] {
            let max_num = self.max_bar_quarters as u32 * den as u32 / 4;
            for num in 1..=max_num.min(255) {
                out.push((num as u8, den));
            }
        }
        out
    }
}

fn nearest<T: Copy>(values: &[T], dist: impl Fn(T) -> f64) -> T {
    let mut best = values[0];
    let mut best_d = dist(best);
    for &v in &values[1..] {
        let d = dist(v);
        if d < best_d {
            best = v;
            best_d = d;
        }
    }
    best
}

/// The base (pre-BPE) token table.
#[derive(Clone, Debug)]
pub struct BaseVocab {
    config: TokenConfig,
    tokens: Vec<BaseToken>,
    index: HashMap<BaseToken, u32>,
}

impl BaseVocab {
    pub fn new(config: TokenConfig) -> Self {
        let mut tokens = vec![
            BaseToken::Pad,
            BaseToken::BarNone,
            BaseToken::TrackStart,
            BaseToken::TrackEnd,
            BaseToken::FillBarStart,
            BaseToken::FillBarEnd,
            BaseToken::InfillBar,
        ];
        tokens.extend((config.pitch_min..=config.pitch_max).map(BaseToken::Pitch));
        tokens.extend(config.velocity_values().into_iter().map(BaseToken::Velocity));
        tokens.extend((1..=config.max_duration_units()).map(BaseToken::Duration));
        tokens.extend((0..config.max_positions()).map(BaseToken::Position));
        tokens.extend((0..config.tempo_bins).map(BaseToken::Tempo));
        tokens.extend(config.time_signatures().into_iter().map(|(n, d)| BaseToken::TimeSig(n, d)));
        tokens.extend((0..128u8).map(|p| BaseToken::Program(Program::Melodic(p))));
        tokens.push(BaseToken::Program(Program::Drums));
        tokens.extend((1..=DENSITY_OVER).map(BaseToken::Density));
        for class in DurClass::ALL {
            tokens.push(BaseToken::DurClass(class, false));
            tokens.push(BaseToken::DurClass(class, true));
        }
        tokens.extend((1..=config.max_polyphony).map(BaseToken::PolyMin));
        tokens.extend((1..=config.max_polyphony).map(BaseToken::PolyMax));
        let index = tokens.iter().enumerate().map(|(i, t)| (*t, i as u32)).collect();
        Self {
            config,
            tokens,
            index,
        }
    }

    pub fn config(&self) -> &TokenConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[BaseToken] {
        &self.tokens
    }

    pub fn id(&self, token: BaseToken) -> Option<u32> {
        self.index.get(&token).copied()
    }

    /// Id of a token that is part of every vocabulary (delimiters, controls
    /// within range). Panics for tokens outside the configured bins.
    pub fn must(&self, token: BaseToken) -> u32 {
        self.id(token)
            .unwrap_or_else(|| panic!("{token} is not in the base vocabulary"))
    }

    pub fn token(&self, id: u32) -> Option<BaseToken> {
        self.tokens.get(id as usize).copied()
    }

    pub fn encode(&self, tokens: &[BaseToken]) -> Result<Vec<u32>, TokenizerError> {
        tokens
            .iter()
            .map(|t| {
                self.id(*t)
                    .ok_or_else(|| TokenizerError::Unsupported(format!("{t} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<BaseToken>, TokenizerError> {
        ids.iter()
            .map(|&id| {
                self.token(id).ok_or(TokenizerError::IdOutOfRange {
                    id,
                    size: self.len(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_vocab_layout_is_consistent() {
        let v = BaseVocab::new(TokenConfig::default());
        assert_eq!(v.id(BaseToken::Pad), Some(0));
        assert_eq!(v.id(BaseToken::BarNone), Some(1));
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(*t), Some(i as u32), "duplicate token {t}");
        }
        // 7 specials, 88 pitches, 32 velocities, 128 durations, 64 positions,
        // 32 tempos, 60 time signatures, 129 programs, 19 densities,
        // 10 duration flags, 16 + 16 polyphony bounds.
        assert_eq!(v.len(), 601);
    }

    #[test]
    fn velocity_and_tempo_bins() {
        let c = TokenConfig::default();
        let vel = c.velocity_values();
        assert_eq!(vel.len(), 32);
        assert_eq!(*vel.last().unwrap(), 127);
        assert!(vel.windows(2).all(|w| w[0] < w[1]));
        for v in 1..=127u8 {
            let q = c.quantize_velocity(v);
            assert_eq!(c.quantize_velocity(q), q);
        }
        let tempos = c.tempo_values();
        assert!((tempos[0] - 40.0).abs() < 1e-9);
        assert!((tempos[31] - 250.0).abs() < 1e-9);
        for (i, bpm) in tempos.iter().enumerate() {
            assert_eq!(c.tempo_bin(*bpm) as usize, i);
        }
        assert_eq!(c.tempo_bin(10.0), 0);
        assert_eq!(c.tempo_bin(900.0), 31);
    }

    #[test]
    fn token_classes() {
        assert!(BaseToken::BarNone.is_structural());
        assert!(BaseToken::Program(Program::Drums).is_structural());
        assert!(BaseToken::Density(3).is_control());
        assert!(BaseToken::Pitch(60).is_mergeable());
        assert!(BaseToken::TimeSig(4, 4).is_mergeable());
        assert!(!BaseToken::PolyMax(2).is_mergeable());
    }
}
