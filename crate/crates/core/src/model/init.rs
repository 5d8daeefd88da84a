//! Parameter initialization.

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::ops::{lit, Real};
use super::{Model, ModelConfig, ModelError};
use crate::rng::{seeded, Rng};

/// Random matrix with orthonormal rows (or columns, whichever is shorter),
/// scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> Vec<f64> {
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    // n orthonormal vectors of length m
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = gain * if rows <= cols { basis[i][j] } else { basis[j][i] };
        }
    }
    out
}

fn ortho_gain(rows: usize, cols: usize, scale: f64) -> f64 {
    let g = if rows > cols { (rows as f64 / cols as f64).sqrt() } else { 1.0 };
    g * scale
}

impl<F: Real> Model<F> {
    /// The RWKV-7 reference initialization. Output projections and channel-mix
    /// value matrices start at zero, as do the first factors of the low-rank
    /// gates.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut m = Self::zeros(cfg)?;
        let mut rng = seeded(seed);
        let c = cfg.d_model;
        let n = cfg.head_size;
        let layers = cfg.n_layers;
        let layout = m.layout.clone();
        let mut set = |off: usize, vals: &[f64]| {
            for (i, &v) in vals.iter().enumerate() {
                m.params[off + i] = lit(v);
            }
        };
        let uniform = |rng: &mut Rng, len: usize, bound: f64| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
        };

        set(layout.emb, &uniform(&mut rng, cfg.vocab_size * c, 1e-4));
        set(layout.ln0_w, &vec![1.0; c]);
        set(layout.ln_out_w, &vec![1.0; c]);
        let head_gain = if cfg.vocab_size > c {
            0.5 * (cfg.vocab_size as f64 / c as f64).sqrt()
        } else {
            0.5
        };
        set(layout.head, &orthogonal(c, cfg.vocab_size, head_gain, &mut rng));

        for (l, o) in layout.layers.iter().enumerate() {
            let r01 = if layers > 1 { l as f64 / (layers - 1) as f64 } else { 0.0 };
            let r1a0 = 1.0 - l as f64 / layers as f64;
            let ddd: Vec<f64> = (0..c).map(|i| i as f64 / c as f64).collect();
            let mix = |p: f64| -> Vec<f64> { ddd.iter().map(|d| 1.0 - d.powf(p)).collect() };
            let linear: Vec<f64> = (0..c).map(|i| i as f64 / (c - 1).max(1) as f64 - 0.5).collect();
            let half = (n as f64 - 1.0) / 2.0;
            let zigzag: Vec<f64> = (0..c)
                .map(|i| {
                    let z = if half > 0.0 { ((i % n) as f64 - half) / half } else { 0.0 };
                    z * z.abs()
                })
                .collect();
            let www: Vec<f64> = (0..c)
                .map(|i| -6.0 + 6.0 * (i as f64 / (c - 1).max(1) as f64).powf(1.0 + r01.powf(0.3)))
                .collect();

            set(o.ln1_w, &vec![1.0; c]);
            set(o.ln2_w, &vec![1.0; c]);
            set(o.x_r, &mix(0.2 * r1a0));
            set(o.x_w, &mix(0.9 * r1a0));
            set(o.x_k, &mix(0.7 * r1a0));
            set(o.x_v, &mix(0.7 * r1a0));
            set(o.x_a, &mix(0.9 * r1a0));
            set(o.x_g, &mix(0.2 * r1a0));
            let w0: Vec<f64> = (0..c).map(|i| www[i] + 0.5 + zigzag[i] * 2.5).collect();
            set(o.w0, &w0);
            let (dd, da, dm, dg) = (cfg.d_decay(), cfg.d_aaa(), cfg.d_mv(), cfg.d_gate());
            set(o.w2, &orthogonal(dd, c, ortho_gain(dd, c, 0.1), &mut rng));
            let a0: Vec<f64> = (0..c).map(|i| -0.19 + zigzag[i] * 0.3 + linear[i] * 0.4).collect();
            set(o.a0, &a0);
            set(o.a2, &orthogonal(da, c, ortho_gain(da, c, 0.1), &mut rng));
            if let (Some(v0), Some(v2)) = (o.v0, o.v2) {
                let v: Vec<f64> = (0..c).map(|i| 0.73 - linear[i] * 0.4).collect();
                set(v0, &v);
                set(v2, &orthogonal(dm, c, ortho_gain(dm, c, 0.1), &mut rng));
            }
            set(o.g2, &orthogonal(dg, c, ortho_gain(dg, c, 0.1), &mut rng));
            let kk: Vec<f64> = (0..c).map(|i| 0.71 - linear[i] * 0.1).collect();
            set(o.k_k, &kk);
            set(o.k_a, &vec![1.02; c]);
            set(o.r_k, &vec![-0.04; c]);
            let s = 1.0 / (c as f64).sqrt();
            set(o.wr, &uniform(&mut rng, c * c, 0.5 * s));
            set(o.wk, &uniform(&mut rng, c * c, 0.05 * s));
            set(o.wv, &uniform(&mut rng, c * c, 0.5 * s));
            set(o.lnx_w, &vec![((1 + l) as f64 / layers as f64).powf(0.7); c]);
            set(o.ffn_x_k, &mix(r1a0.powi(4)));
            set(o.ffn_key, &uniform(&mut rng, c * cfg.d_ffn, 0.5 * s));
        }
        Ok(m)
    }

    /// Every parameter drawn at random, for gradient checks where the
    /// zero-initialized matrices of [`Model::init`] would hide terms.
    pub fn random(cfg: ModelConfig, seed: u64, scale: f64) -> Result<Self, ModelError> {
        let mut m = Self::zeros(cfg)?;
        let mut rng = seeded(seed);
        let layout = m.layout.clone();
        for t in &layout.tensors {
            let norm_weight = t.name.ends_with(".weight") && t.shape.len() == 1;
            let fan_in = if t.shape.len() == 2 { t.shape[0] as f64 } else { 1.0 };
            for i in 0..t.len() {
                let u: f64 = rng.gen_range(-1.0..1.0);
                let v = if norm_weight {
                    1.0 + 0.3 * u
                } else if t.shape.len() == 2 {
                    scale * u / fan_in.sqrt()
                } else {
                    scale * u
                };
                m.params[t.offset + i] = lit(v);
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = seeded(3);
        let w = orthogonal(4, 9, 1.0, &mut rng);
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = (0..9).map(|k| w[i * 9 + k] * w[j * 9 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
        let tall = orthogonal(9, 4, 2.0, &mut rng);
        for i in 0..4 {
            let d: f64 = (0..9).map(|k| tall[k * 4 + i] * tall[k * 4 + i]).sum();
            assert!((d - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_initialized_tensors() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 32,
            head_size: 16,
            d_ffn: 64,
            vocab_size: 20,
        };
        let m = Model::<f64>::init(cfg, 1).unwrap();
        for name in ["blocks.0.att.output", "blocks.1.ffn.value", "blocks.0.att.w1"] {
            assert!(m.tensor(name).unwrap().iter().all(|&v| v == 0.0), "{name}");
        }
        assert!(m.tensor("blocks.0.att.receptance").unwrap().iter().any(|&v| v != 0.0));
    }
}
