//! Objective infilling metrics: content preservation (CP), groove similarity
//! (GS), pitch-class-histogram entropy difference (PCHE) and note F1, plus
//! attribute-control adherence.
//!
//! All functions take the notes of one track and the tick ranges of the
//! compared bars; the original and the infill share the bar grid.
//!
//! Conventions:
//! * A chroma step counts every note sounding at any point of the step once,
//!   by pitch class, then normalizes; silent steps are zero vectors.
//! * The CP moving average is a trailing window of `T/2` steps over the whole
//!   region, clipped at its start. Pairs where either averaged vector is zero
//!   are skipped and counted.
//! * Entropies are in bits.
//! * Groove positions use the tokenizer grid by default.
//! * Notes match for F1 on (bar, grid position, pitch).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::Note;
use crate::prompt::{compute_controls, AttributeControls};
use crate::tokenizer::{TokenConfig, DENSITY_OVER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no bars to compare")]
    NoBars,
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Chroma = [f64; 12];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrooveGrid {
    /// The tokenizer's position grid.
    Tokenizer,
    /// Sixteen steps per bar regardless of meter.
    Sixteen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Chroma steps per bar for CP.
    pub steps_per_bar: usize,
    pub groove_grid: GrooveGrid,
    /// Also require equal grid durations for an F1 match.
    pub f1_with_duration: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            steps_per_bar: 16,
            groove_grid: GrooveGrid::Tokenizer,
            f1_with_duration: false,
        }
    }
}

fn step_bounds(bar: (u32, u32), steps: usize, k: usize) -> (u64, u64) {
    let len = (bar.1 - bar.0) as u64;
    let s = bar.0 as u64;
    (s + len * k as u64 / steps as u64, s + len * (k as u64 + 1) / steps as u64)
}

/// Normalized chroma of each of `steps` equal subdivisions of every bar.
pub fn chroma_steps(notes: &[Note], bars: &[(u32, u32)], steps: usize) -> Vec<Chroma> {
    let mut out = Vec::with_capacity(bars.len() * steps);
    for &bar in bars {
        for k in 0..steps {
            let (lo, hi) = step_bounds(bar, steps, k);
            let mut c = [0.0; 12];
            for n in notes {
                if (n.onset as u64) < hi && (n.offset() as u64) > lo {
                    c[(n.pitch % 12) as usize] += 1.0;
                }
            }
            let sum: f64 = c.iter().sum();
            if sum > 0.0 {
                c.iter_mut().for_each(|v| *v /= sum);
            }
            out.push(c);
        }
    }
    out
}

/// Trailing moving average with window `frame`, clipped at the start.
pub fn moving_average(c: &[Chroma], frame: usize) -> Vec<Chroma> {
    let frame = frame.max(1);
    (0..c.len())
        .map(|t| {
            let from = (t + 1).saturating_sub(frame);
            let mut a = [0.0; 12];
            for v in &c[from..=t] {
                for i in 0..12 {
                    a[i] += v[i];
                }
            }
            let w = (t + 1 - from) as f64;
            a.iter_mut().for_each(|x| *x /= w);
            a
        })
        .collect()
}

fn cosine(a: &Chroma, b: &Chroma) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na * nb).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cp {
    pub value: f64,
    /// Steps compared.
    pub compared: usize,
    /// Steps skipped because one side was silent.
    pub skipped: usize,
}

/// CP over the region. When every step is skipped the value is 1 if both
/// sides are silent throughout and 0 otherwise.
pub fn content_preservation(original: &[Note], infill: &[Note], bars: &[(u32, u32)], steps: usize) -> Result<Cp, MetricError> {
    if bars.is_empty() || steps == 0 {
        return Err(MetricError::NoBars);
    }
    let ao = moving_average(&chroma_steps(original, bars, steps), steps / 2);
    let ai = moving_average(&chroma_steps(infill, bars, steps), steps / 2);
    let mut sum = 0.0;
    let mut compared = 0;
    for (a, b) in ao.iter().zip(&ai) {
        if let Some(c) = cosine(a, b) {
            sum += c;
            compared += 1;
        }
    }
    let skipped = ao.len() - compared;
    let value = if compared > 0 {
        sum / compared as f64
    } else if original.iter().chain(infill).all(|n| !bars.iter().any(|b| n.onset < b.1 && n.offset() > b.0)) {
        1.0
    } else {
        0.0
    };
    Ok(Cp { value, compared, skipped })
}

fn units(ticks: u64, tpq: u16, ppq: u16) -> u64 {
    (ticks * ppq as u64 * 2 + tpq as u64) / (2 * tpq as u64)
}

/// Onset pattern of one bar.
pub fn groove_pattern(notes: &[Note], bar: (u32, u32), tpq: u16, grid: GrooveGrid, cfg: &TokenConfig) -> Vec<bool> {
    let len = (bar.1 - bar.0) as u64;
    let dim = match grid {
        GrooveGrid::Tokenizer => units(len, tpq, cfg.positions_per_quarter).max(1) as usize,
        GrooveGrid::Sixteen => 16,
    };
    let mut g = vec![false; dim];
    for n in notes.iter().filter(|n| n.onset >= bar.0 && n.onset < bar.1) {
        let off = (n.onset - bar.0) as u64;
        let j = match grid {
            GrooveGrid::Tokenizer => units(off, tpq, cfg.positions_per_quarter) as usize,
            GrooveGrid::Sixteen => (off * 16 / len) as usize,
        };
        g[j.min(dim - 1)] = true;
    }
    g
}

/// `1 - mean(g_o XOR g_i)` over every position.
pub fn groove_similarity(a: &[bool], b: &[bool]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Dimension(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::NoBars);
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(1.0 - diff as f64 / a.len() as f64)
}

/// Note counts by pitch class, normalized; zero for an empty bar.
pub fn pitch_class_histogram(notes: &[Note]) -> Chroma {
    let mut h = [0.0; 12];
    for n in notes {
        h[(n.pitch % 12) as usize] += 1.0;
    }
    let s: f64 = h.iter().sum();
    if s > 0.0 {
        h.iter_mut().for_each(|v| *v /= s);
    }
    h
}

pub fn entropy_bits(p: &Chroma) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum();
    h.max(0.0)
}

/// `|H(original) - H(infill)|` for one bar; `None` when both are empty.
pub fn pche_difference(original: &[Note], infill: &[Note]) -> Option<f64> {
    if original.is_empty() && infill.is_empty() {
        return None;
    }
    Some((entropy_bits(&pitch_class_histogram(original)) - entropy_bits(&pitch_class_histogram(infill))).abs())
}

fn note_keys(notes: &[Note], bars: &[(u32, u32)], tpq: u16, ppq: u16, with_duration: bool) -> Vec<(usize, u64, u8, u64)> {
    let mut keys: Vec<_> = notes
        .iter()
        .filter_map(|n| {
            let b = bars.iter().position(|b| n.onset >= b.0 && n.onset < b.1)?;
            let pos = units((n.onset - bars[b].0) as u64, tpq, ppq);
            let dur = if with_duration { units(n.duration as u64, tpq, ppq) } else { 0 };
            Some((b, pos, n.pitch, dur))
        })
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub value: f64,
    /// Both note sets were empty; the value is defined as 1.
    pub both_empty: bool,
}

/// `2 |N_o ∩ N_i| / (|N_o| + |N_i|)`.
pub fn f1_notes(original: &[Note], infill: &[Note], bars: &[(u32, u32)], tpq: u16, cfg: &TokenConfig, with_duration: bool) -> F1 {
    let ppq = cfg.positions_per_quarter;
    let o = note_keys(original, bars, tpq, ppq, with_duration);
    let i = note_keys(infill, bars, tpq, ppq, with_duration);
    if o.is_empty() && i.is_empty() {
        return F1 {
            value: 1.0,
            both_empty: true,
        };
    }
    let mut common = 0;
    let (mut a, mut b) = (0, 0);
    while a < o.len() && b < i.len() {
        match o[a].cmp(&i[b]) {
            std::cmp::Ordering::Less => a += 1,
            std::cmp::Ordering::Greater => b += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                a += 1;
                b += 1;
            }
        }
    }
    F1 {
        value: 2.0 * common as f64 / (o.len() + i.len()) as f64,
        both_empty: false,
    }
}

fn in_bar(notes: &[Note], bar: (u32, u32)) -> Vec<Note> {
    notes.iter().filter(|n| n.onset >= bar.0 && n.onset < bar.1).copied().collect()
}

/// Metrics of one infilled region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub cp: f64,
    pub cp_skipped: usize,
    pub gs: f64,
    /// Mean over bars where at least one side has notes; `None` if none do.
    pub pche: Option<f64>,
    pub f1: f64,
    pub f1_both_empty: bool,
}

pub fn evaluate_pair(
    original: &[Note],
    infill: &[Note],
    bars: &[(u32, u32)],
    tpq: u16,
    tokens: &TokenConfig,
    cfg: &MetricConfig,
) -> Result<PairMetrics, MetricError> {
    if bars.is_empty() {
        return Err(MetricError::NoBars);
    }
    let cp = content_preservation(original, infill, bars, cfg.steps_per_bar)?;
    let mut gs = 0.0;
    let mut pche = Vec::new();
    for &bar in bars {
        let (o, i) = (in_bar(original, bar), in_bar(infill, bar));
        gs += groove_similarity(
            &groove_pattern(&o, bar, tpq, cfg.groove_grid, tokens),
            &groove_pattern(&i, bar, tpq, cfg.groove_grid, tokens),
        )?;
        pche.extend(pche_difference(&o, &i));
    }
    let f1 = f1_notes(original, infill, bars, tpq, tokens, cfg.f1_with_duration);
    Ok(PairMetrics {
        cp: cp.value,
        cp_skipped: cp.skipped,
        gs: gs / bars.len() as f64,
        pche: (!pche.is_empty()).then(|| pche.iter().sum::<f64>() / pche.len() as f64),
        f1: f1.value,
        f1_both_empty: f1.both_empty,
    })
}

/// Per-kind success rates of categorical controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlRates {
    pub density: f64,
    pub duration: f64,
    pub poly_min: f64,
    pub poly_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adherence {
    pub density_abs_diff: f64,
    pub rates: ControlRates,
    pub bars: usize,
}

/// Density contribution of one bar: the open bin matches any realized count
/// of 18 or more.
pub fn density_error(requested: u8, realized: usize) -> f64 {
    if requested == DENSITY_OVER && realized >= 18 {
        0.0
    } else {
        (realized as f64 - requested.min(18) as f64).abs()
    }
}

/// Compares requested controls with those recomputed from each generated bar.
/// An empty generated bar fails every categorical control.
pub fn attribute_adherence(
    requested: &[AttributeControls],
    generated: &[Note],
    bars: &[(u32, u32)],
    tpq: u16,
    cfg: &TokenConfig,
) -> Result<Adherence, MetricError> {
    if requested.len() != bars.len() {
        return Err(MetricError::Dimension(requested.len(), bars.len()));
    }
    if bars.is_empty() {
        return Err(MetricError::NoBars);
    }
    let mut diff = 0.0;
    let mut hits = [0usize; 4];
    for (req, &bar) in requested.iter().zip(bars) {
        let notes = in_bar(generated, bar);
        diff += density_error(req.density, notes.len());
        if let Ok(got) = compute_controls(&notes, tpq, cfg) {
            hits[0] += (got.density == req.density) as usize;
            hits[1] += (got.dur_flags == req.dur_flags) as usize;
            hits[2] += (got.poly_min == req.poly_min) as usize;
            hits[3] += (got.poly_max == req.poly_max) as usize;
        }
    }
    let n = bars.len() as f64;
    Ok(Adherence {
        density_abs_diff: diff / n,
        rates: ControlRates {
            density: hits[0] as f64 / n,
            duration: hits[1] as f64 / n,
            poly_min: hits[2] as f64 / n,
            poly_max: hits[3] as f64 / n,
        },
        bars: bars.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Population standard deviation; zeros for an empty sample.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cp: MeanStd,
    pub gs: MeanStd,
    pub pche: MeanStd,
    pub f1: MeanStd,
    pub density_abs_diff: f64,
    pub categorical_success: ControlRates,
    /// Per-example values, for downstream significance tests.
    pub examples: Vec<PairMetrics>,
}

impl MetricReport {
    pub fn from_pairs(examples: Vec<PairMetrics>, adherence: &[Adherence]) -> Self {
        let col = |f: &dyn Fn(&PairMetrics) -> Option<f64>| -> Vec<f64> { examples.iter().filter_map(f).collect() };
        let total_bars: usize = adherence.iter().map(|a| a.bars).sum();
        let weighted = |f: &dyn Fn(&Adherence) -> f64| -> f64 {
            if total_bars == 0 {
                0.0
            } else {
                adherence.iter().map(|a| f(a) * a.bars as f64).sum::<f64>() / total_bars as f64
            }
        };
        Self {
            cp: MeanStd::of(&col(&|p| Some(p.cp))),
            gs: MeanStd::of(&col(&|p| Some(p.gs))),
            pche: MeanStd::of(&col(&|p| p.pche)),
            f1: MeanStd::of(&col(&|p| Some(p.f1))),
            density_abs_diff: weighted(&|a| a.density_abs_diff),
            categorical_success: ControlRates {
                density: weighted(&|a| a.rates.density),
                duration: weighted(&|a| a.rates.duration),
                poly_min: weighted(&|a| a.rates.poly_min),
                poly_max: weighted(&|a| a.rates.poly_max),
            },
            examples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BAR: (u32, u32) = (0, 1920);

    #[test]
    fn groove_examples() {
        let a = [true, false, false, false];
        let b = [true, false, true, false];
        assert_eq!(groove_similarity(&a, &b).unwrap(), 0.75);
        assert_eq!(groove_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(groove_similarity(&[true, false], &[false, true]).unwrap(), 0.0);
        assert!(groove_similarity(&a, &b[..3]).is_err());
    }

    #[test]
    fn pche_examples() {
        let uniform: Vec<Note> = (0..12).map(|i| Note::new(60 + i, 80, 0, 120)).collect();
        let single = vec![Note::new(62, 80, 0, 120), Note::new(74, 80, 480, 120)];
        assert_eq!(pche_difference(&uniform, &single).unwrap(), 12f64.log2());
        assert_eq!(pche_difference(&single, &single).unwrap(), 0.0);
        assert_eq!(pche_difference(&[], &[]), None);
    }

    #[test]
    fn cp_identity_and_orthogonality() {
        let c: Vec<Note> = (0..4).map(|i| Note::new(60, 80, i * 480, 480)).collect();
        let fs: Vec<Note> = (0..4).map(|i| Note::new(66, 80, i * 480, 480)).collect();
        assert_eq!(content_preservation(&c, &c, &[BAR], 16).unwrap().value, 1.0);
        assert_eq!(content_preservation(&c, &fs, &[BAR], 16).unwrap().value, 0.0);
        let half = vec![Note::new(60, 80, 0, 960)];
        let cp = content_preservation(&half, &half, &[BAR], 16).unwrap();
        assert_eq!(cp.value, 1.0);
        // The trailing window runs dry only at the last step.
        assert_eq!((cp.compared, cp.skipped), (15, 1));
    }

    #[test]
    fn f1_arithmetic() {
        let o: Vec<Note> = (0..4).map(|i| Note::new(60 + i, 80, i as u32 * 240, 240)).collect();
        let mut i: Vec<Note> = o[..3].to_vec();
        i.extend((0..3).map(|k| Note::new(40 + k, 80, 0, 240)));
        let f = f1_notes(&o, &i, &[BAR], 480, &TokenConfig::default(), false);
        assert!((f.value - 0.6).abs() < 1e-15);
        assert_eq!(f1_notes(&[], &[], &[BAR], 480, &TokenConfig::default(), false).value, 1.0);
    }

    #[test]
    fn density_open_bin() {
        assert_eq!(density_error(5, 7), 2.0);
        assert_eq!(density_error(DENSITY_OVER, 25), 0.0);
        assert_eq!(density_error(DENSITY_OVER, 18), 0.0);
        assert_eq!(density_error(DENSITY_OVER, 15), 3.0);
    }
}
