//! Synthetic corpora with known structure.
//!
//! [`MarkovChain`] is an order-2 source whose entropy rate is computable in
//! closed form, used to check that training converges to it. [`style_score`]
//! generates two clearly different musical styles for personalization
//! experiments, and [`random_score`] produces arbitrary valid scores for
//! round-trip tests.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::midi::{Note, Program, Score, TempoChange, TimeSignature, Track};
use crate::rng::{seeded, substream, Rng};

/// Order-2 Markov chain over `k` symbols; `probs[(a k + b) k + c]` is
/// `P(c | a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    pub k: usize,
    pub probs: Vec<f64>,
}

impl MarkovChain {
    /// Rows are softmaxes of Gaussian logits scaled by `sharpness`; larger
    /// values give lower entropy.
    pub fn random(k: usize, sharpness: f64, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut probs = Vec::with_capacity(k * k * k);
        for _ in 0..k * k {
            let w: Vec<f64> = (0..k)
                .map(|_| (sharpness * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect();
            let s: f64 = w.iter().sum();
            probs.extend(w.iter().map(|v| v / s));
        }
        Self { k, probs }
    }

    pub fn row(&self, a: usize, b: usize) -> &[f64] {
        let at = (a * self.k + b) * self.k;
        &self.probs[at..at + self.k]
    }

    /// First two symbols uniform, then the chain.
    pub fn sample(&self, len: usize, rng: &mut Rng) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::with_capacity(len);
        for t in 0..len {
            let next = if t < 2 {
                rng.gen_range(0..self.k)
            } else {
                let row = self.row(out[t - 2] as usize, out[t - 1] as usize);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                row.iter()
                    .position(|&p| {
                        acc += p;
                        u < acc
                    })
                    .unwrap_or(self.k - 1)
            };
            out.push(next as u32);
        }
        out
    }

    /// Stationary distribution over pairs `(a, b)` by power iteration from
    /// the uniform start.
    pub fn stationary(&self) -> Vec<f64> {
        let k = self.k;
        let mut pi = vec![1.0 / (k * k) as f64; k * k];
        for _ in 0..10_000 {
            let mut next = vec![0.0; k * k];
            for a in 0..k {
                for b in 0..k {
                    let m = pi[a * k + b];
                    for (c, &p) in self.row(a, b).iter().enumerate() {
                        next[b * k + c] += m * p;
                    }
                }
            }
            let diff: f64 = next.iter().zip(&pi).map(|(x, y)| (x - y).abs()).sum();
            pi = next;
            if diff < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats: `Σ π(a, b) H(P(· | a, b))`.
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        let k = self.k;
        let mut h = 0.0;
        for a in 0..k {
            for b in 0..k {
                let row_h: f64 = self.row(a, b).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
                h += pi[a * k + b] * row_h;
            }
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Style {
    /// Slow stepwise major-key melody in quarter and half notes over a
    /// half-note bass and off-beat chord tones.
    Lyrical,
    /// Fast minor-pentatonic eighth notes with leaps, a driving bass and a
    /// drum pattern.
    Driving,
}

const TPQ: u16 = 480;

/// A score of `bars` bars in 4/4 in the given style.
pub fn style_score(style: Style, bars: u32, seed: u64) -> Score {
    let mut rng = substream(seed, &[style as u64]);
    let mut score = Score::new(TPQ);
    let q = TPQ as u32;
    let bar = 4 * q;
    match style {
        Style::Lyrical => {
            score.tempo_map = vec![TempoChange::from_bpm(0, 84.0)];
            let scale = [0i32, 2, 4, 5, 7, 9, 11];
            let degree_pitch = |d: i32| 60 + 12 * d.div_euclid(7) + scale[d.rem_euclid(7) as usize];
            let mut mel = Track::new(Program::Melodic(0));
            let mut bass = Track::new(Program::Melodic(32));
            let mut pad = Track::new(Program::Melodic(48));
            let mut degree: i32 = rng.gen_range(0..7);
            let roots = [0i32, 5, 7, 9];
            for b in 0..bars {
                let start = b * bar;
                let mut t = 0;
                while t < bar {
                    let len = if t + 2 * q <= bar && rng.gen_bool(0.3) { 2 * q } else { q };
                    let step = [-2, -1, -1, 1, 1, 2][rng.gen_range(0..6)];
                    degree = (degree + step).clamp(0, 11);
                    mel.notes.push(Note::new(degree_pitch(degree) as u8, 72, start + t, len - q / 8));
                    t += len;
                }
                let root = 36 + roots[((b / 2) % 4) as usize];
                bass.notes.push(Note::new(root as u8, 64, start, 2 * q - q / 8));
                bass.notes.push(Note::new((root + 7) as u8, 60, start + 2 * q, 2 * q - q / 8));
                let third = if root == 45 { 12 + 3 } else { 12 + 4 };
                for beat in [1, 3] {
                    pad.notes.push(Note::new((root + third) as u8, 52, start + beat * q, q - q / 8));
                }
            }
            score.tracks = vec![mel, bass, pad];
        }
        Style::Driving => {
            score.tempo_map = vec![TempoChange::from_bpm(0, 140.0)];
            let penta = [0i32, 3, 5, 7, 10];
            let degree_pitch = |d: i32| 57 + 12 * d.div_euclid(5) + penta[d.rem_euclid(5) as usize];
            let mut mel = Track::new(Program::Melodic(29));
            let mut bass = Track::new(Program::Melodic(33));
            let mut drums = Track::new(Program::Drums);
            let mut degree: i32 = rng.gen_range(0..5);
            let e = q / 2;
            for b in 0..bars {
                let start = b * bar;
                for i in 0..8 {
                    let step = [-4, -3, -2, 2, 3, 4][rng.gen_range(0..6)];
                    degree = (degree + step).clamp(-3, 8);
                    let vel = if i % 2 == 0 { 104 } else { 84 };
                    mel.notes.push(Note::new(degree_pitch(degree) as u8, vel, start + i * e, e - e / 4));
                    let bp = if i % 4 == 3 { 40 } else { 33 };
                    bass.notes.push(Note::new(bp, 96, start + i * e, e / 2));
                    drums.notes.push(Note::new(42, 70, start + i * e, e / 4));
                }
                for beat in [0, 2] {
                    drums.notes.push(Note::new(36, 110, start + beat * q, e / 4));
                }
                for beat in [1, 3] {
                    drums.notes.push(Note::new(38, 100, start + beat * q, e / 4));
                }
            }
            for t in [&mut mel, &mut bass, &mut drums] {
                t.normalize();
            }
            score.tracks = vec![mel, bass, drums];
        }
    }
    score
}

/// Arbitrary valid score: 1-4 tracks, unquantized onsets and durations,
/// optional tempo and time-signature changes on bar lines.
pub fn random_score(seed: u64) -> Score {
    let mut rng = seeded(seed);
    let tpq = [96u16, 120, 192, 384, 480][rng.gen_range(0..5)];
    let mut score = Score::new(tpq);
    let q = tpq as u32;
    let bars = rng.gen_range(1..12u32);
    let sigs = [(4u8, 4u8), (3, 4), (6, 8), (2, 4), (5, 4), (7, 8)];
    let mut tick = 0u32;
    score.timesig_map.clear();
    score.tempo_map = vec![TempoChange::from_bpm(0, rng.gen_range(50.0..200.0))];
    let mut current = sigs[rng.gen_range(0..sigs.len())];
    for b in 0..bars {
        if b == 0 || rng.gen_bool(0.15) {
            current = sigs[rng.gen_range(0..sigs.len())];
            if score.timesig_map.last().map(|t| (t.numerator, t.denominator)) != Some(current) {
                score.timesig_map.push(TimeSignature::new(tick, current.0, current.1));
            }
        }
        if b > 0 && rng.gen_bool(0.1) {
            score.tempo_map.push(TempoChange::from_bpm(tick, rng.gen_range(50.0..200.0)));
        }
        tick += q * 4 * current.0 as u32 / current.1 as u32;
    }
    let end = tick;
    for _ in 0..rng.gen_range(1..=4) {
        let program = if rng.gen_bool(0.2) {
            Program::Drums
        } else {
            Program::Melodic(rng.gen_range(0..128))
        };
        let mut track = Track::new(program);
        for _ in 0..rng.gen_range(0..60) {
            let onset = rng.gen_range(0..end);
            let dur = rng.gen_range(1..=q * 3);
            track
                .notes
                .push(Note::new(rng.gen_range(21..=108), rng.gen_range(1..=127), onset, dur));
        }
        track.normalize();
        score.tracks.push(track);
    }
    score
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::CorpusFilter;

    #[test]
    fn markov_rows_are_distributions() {
        let m = MarkovChain::random(5, 2.0, 1);
        for a in 0..5 {
            for b in 0..5 {
                assert!((m.row(a, b).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let pi = m.stationary();
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let h = m.entropy_rate();
        assert!(h > 0.0 && h < (5f64).ln());
    }

    #[test]
    fn style_scores_are_valid_and_pass_the_filter() {
        for style in [Style::Lyrical, Style::Driving] {
            let s = style_score(style, 16, 3);
            s.validate().unwrap();
            CorpusFilter::default().check(&s).unwrap();
        }
    }

    #[test]
    fn random_scores_validate() {
        for seed in 0..100 {
            random_score(seed).validate().unwrap();
        }
    }
}
