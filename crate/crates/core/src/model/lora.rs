//! Low-rank adapters on the large projection matrices.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ops::{lit, Real};
use super::{Layout, Model, ModelConfig, ModelError};
use crate::rng::seeded;

const TARGETS: [&str; 6] = ["att.receptance", "att.key", "att.value", "att.output", "ffn.key", "ffn.value"];

/// Adapted matrices with their `(rows, cols)`.
pub(super) fn lora_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let layout = Layout::new(cfg);
    (0..cfg.n_layers)
        .flat_map(|l| TARGETS.iter().map(move |t| format!("blocks.{l}.{t}")))
        .map(|name| {
            let info = layout.tensor(&name).expect("target tensor exists");
            (name, info.shape[0], info.shape[1])
        })
        .collect()
}

/// One adapted matrix `W + s A B`, `A: rows × r`, `B: r × cols`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraTarget {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub a_offset: usize,
    pub b_offset: usize,
}

#[derive(Clone, Debug)]
pub struct LoraAdapter<F> {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
    pub params: Vec<F>,
}

impl<F: Real> LoraAdapter<F> {
    /// `A` uniform in `±1/sqrt(rows)`, `B` zero, so the adapted model starts
    /// equal to the base.
    pub fn new(cfg: &ModelConfig, rank: usize, alpha: f64, seed: u64) -> Result<Self, ModelError> {
        if rank == 0 {
            return Err(ModelError::Config("LoRA rank must be positive".into()));
        }
        let mut rng = seeded(seed);
        let mut targets = Vec::new();
        let mut params = Vec::new();
        for (name, rows, cols) in lora_shapes(cfg) {
            let a_offset = params.len();
            let bound = 1.0 / (rows as f64).sqrt();
            params.extend((0..rows * rank).map(|_| lit::<F>(rng.gen_range(-bound..bound))));
            let b_offset = params.len();
            params.extend(std::iter::repeat_n(F::zero(), rank * cols));
            targets.push(LoraTarget {
                name,
                rows,
                cols,
                a_offset,
                b_offset,
            });
        }
        Ok(Self {
            rank,
            alpha,
            targets,
            params,
        })
    }

    pub fn scale(&self) -> F {
        lit(self.alpha / self.rank as f64)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Base model with every target replaced by `W + s A B`.
    pub fn merge(&self, base: &Model<F>) -> Result<Model<F>, ModelError> {
        let mut m = base.clone();
        let s = self.scale();
        let r = self.rank;
        for t in &self.targets {
            let info = base
                .layout()
                .tensor(&t.name)
                .ok_or_else(|| ModelError::Shape(format!("base model has no tensor {}", t.name)))?;
            if info.shape != [t.rows, t.cols] {
                return Err(ModelError::Shape(format!("{} is {:?}, adapter expects {}x{}", t.name, info.shape, t.rows, t.cols)));
            }
            let a = &self.params[t.a_offset..t.a_offset + t.rows * r];
            let b = &self.params[t.b_offset..t.b_offset + r * t.cols];
            for i in 0..t.rows {
                let row = &mut m.params[info.offset + i * t.cols..info.offset + (i + 1) * t.cols];
                for q in 0..r {
                    let aiq = s * a[i * r + q];
                    if aiq == F::zero() {
                        continue;
                    }
                    for (w, &bq) in row.iter_mut().zip(&b[q * t.cols..(q + 1) * t.cols]) {
                        *w = *w + aiq * bq;
                    }
                }
            }
        }
        Ok(m)
    }

    /// Adapter gradient from the gradient of the merged weights:
    /// `dA = s dW Bᵀ`, `dB = s Aᵀ dW`.
    pub fn grads(&self, layout: &Layout, dparams: &[F]) -> Vec<F> {
        let s = self.scale();
        let r = self.rank;
        let mut out = vec![F::zero(); self.params.len()];
        for t in &self.targets {
            let info = layout.tensor(&t.name).expect("adapter matches layout");
            let dw = &dparams[info.offset..info.offset + t.rows * t.cols];
            let a = &self.params[t.a_offset..t.a_offset + t.rows * r];
            let b = &self.params[t.b_offset..t.b_offset + r * t.cols];
            let (da, rest) = out[t.a_offset..].split_at_mut(t.b_offset - t.a_offset);
            let db = &mut rest[..r * t.cols];
            for i in 0..t.rows {
                let dwr = &dw[i * t.cols..(i + 1) * t.cols];
                for q in 0..r {
                    let bq = &b[q * t.cols..(q + 1) * t.cols];
                    da[i * r + q] = s * dwr.iter().zip(bq).map(|(&x, &y)| x * y).sum::<F>();
                    let aiq = s * a[i * r + q];
                    for (g, &x) in db[q * t.cols..(q + 1) * t.cols].iter_mut().zip(dwr) {
                        *g = *g + aiq * x;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_trainable, TrainMode};

    #[test]
    fn counts_match_rank_times_dims() {
        let cfg = ModelConfig::reference(16000);
        assert_eq!(count_trainable(&cfg, TrainMode::Lora { rank: 4 }), 313_344);
        assert_eq!(count_trainable(&cfg, TrainMode::Lora { rank: 32 }), 2_506_752);
        let tiny = ModelConfig {
            n_layers: 2,
            d_model: 16,
            head_size: 8,
            d_ffn: 32,
            vocab_size: 30,
        };
        let ad = LoraAdapter::<f64>::new(&tiny, 3, 6.0, 1).unwrap();
        assert_eq!(ad.param_count(), count_trainable(&tiny, TrainMode::Lora { rank: 3 }));
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let tiny = ModelConfig {
            n_layers: 2,
            d_model: 16,
            head_size: 8,
            d_ffn: 32,
            vocab_size: 30,
        };
        let base = Model::<f64>::random(tiny, 2, 0.5).unwrap();
        let ad = LoraAdapter::new(&tiny, 2, 4.0, 3).unwrap();
        assert_eq!(ad.merge(&base).unwrap().params, base.params);
    }
}
