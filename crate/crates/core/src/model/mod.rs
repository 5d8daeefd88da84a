//! RWKV-7 ("x070") language model.
//!
//! Each layer applies a time-mixing block (token shift, low-rank decay and
//! in-context-rate gates, value residual, a per-head matrix state updated by
//! the generalized delta rule) and a squared-ReLU channel-mixing block. The
//! per-head state update, with `w` the decay, `κ̂` the normalized key, `a`
//! the in-context rate, is
//!
//! ```text
//! S_t = S_{t-1} diag(w) + (S_{t-1} (-κ̂)) (κ̂ ⊙ a)ᵀ + v kᵀ,      y = S_t r
//! ```
//!
//! where rows of `S` are indexed by value channels and columns by key
//! channels. See `MODEL.md` in the repository for the complete layer
//! equations and initialization.
//!
//! Parameters live in one flat vector described by a [`Layout`]; gradients use
//! the same layout. Two forward implementations exist: [`Model::forward_step`]
//! runs one token through all layers with a mutable [`State`], and
//! [`Model::forward_sequence`] runs a whole sequence layer by layer with
//! batched matrix products. The latter is what training differentiates.

mod checkpoint;
mod init;
mod lora;
pub mod ops;
mod step;
mod tape;

pub use checkpoint::{read_tensor_file, write_tensor_file, CheckpointError, TensorFile, TensorRecord, CHECKPOINT_MAGIC};
pub use lora::{LoraAdapter, LoraTarget};
pub use tape::{Gradients, Need};

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use ops::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("token id {id} outside vocabulary of size {size}")]
    Token { id: u32, size: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target mask selects no position")]
    EmptyMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub head_size: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
}

fn lora_dim(c: usize, mult: f64) -> usize {
    let r = (mult * (c as f64).sqrt() / 32.0).round() as usize * 32;
    r.max(32)
}

impl ModelConfig {
    /// 12 layers, width 384, head size 64, feed-forward width 1344.
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            n_layers: 12,
            d_model: 384,
            head_size: 64,
            d_ffn: 1344,
            vocab_size,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.d_model / self.head_size
    }

    /// Rank of the decay projection.
    pub fn d_decay(&self) -> usize {
        lora_dim(self.d_model, 2.5)
    }

    /// Rank of the in-context-rate projection.
    pub fn d_aaa(&self) -> usize {
        lora_dim(self.d_model, 2.5)
    }

    /// Rank of the value-residual projection.
    pub fn d_mv(&self) -> usize {
        lora_dim(self.d_model, 1.7)
    }

    /// Rank of the output-gate projection.
    pub fn d_gate(&self) -> usize {
        lora_dim(self.d_model, 5.0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ffn == 0 || self.vocab_size == 0 {
            return bad("all dimensions must be positive");
        }
        if self.head_size == 0 || self.d_model % self.head_size != 0 {
            return bad("d_model must be a multiple of head_size");
        }
        Ok(())
    }

    /// Floats in one layer's state: two shift vectors and the WKV matrices.
    pub fn state_layer_len(&self) -> usize {
        2 * self.d_model + self.n_heads() * self.head_size * self.head_size
    }

    pub fn state_len(&self) -> usize {
        self.n_layers * self.state_layer_len()
    }
}

/// Offsets of one layer's tensors in the flat parameter vector.
#[derive(Clone, Debug)]
pub struct LayerOffsets {
    pub ln1_w: usize,
    pub ln1_b: usize,
    pub ln2_w: usize,
    pub ln2_b: usize,
    pub x_r: usize,
    pub x_w: usize,
    pub x_k: usize,
    pub x_v: usize,
    pub x_a: usize,
    pub x_g: usize,
    pub w0: usize,
    pub w1: usize,
    pub w2: usize,
    pub a0: usize,
    pub a1: usize,
    pub a2: usize,
    /// Value-residual gate; absent on the first layer.
    pub v0: Option<usize>,
    pub v1: Option<usize>,
    pub v2: Option<usize>,
    pub g1: usize,
    pub g2: usize,
    pub k_k: usize,
    pub k_a: usize,
    pub r_k: usize,
    pub wr: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub lnx_w: usize,
    pub lnx_b: usize,
    pub ffn_x_k: usize,
    pub ffn_key: usize,
    pub ffn_value: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named-tensor table over the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Layout {
    pub emb: usize,
    pub ln0_w: usize,
    pub ln0_b: usize,
    pub layers: Vec<LayerOffsets>,
    pub ln_out_w: usize,
    pub ln_out_b: usize,
    pub head: usize,
    pub total: usize,
    pub tensors: Vec<TensorInfo>,
    index: HashMap<String, usize>,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    next: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize]) -> usize {
        let offset = self.next;
        self.next += shape.iter().product::<usize>();
        self.tensors.push(TensorInfo {
            name,
            shape: shape.to_vec(),
            offset,
        });
        offset
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.d_model;
        let mut b = Builder {
            tensors: Vec::new(),
            next: 0,
        };
        let emb = b.add("emb".into(), &[cfg.vocab_size, c]);
        let ln0_w = b.add("ln0.weight".into(), &[c]);
        let ln0_b = b.add("ln0.bias".into(), &[c]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let ln1_w = b.add(p("ln1.weight"), &[c]);
            let ln1_b = b.add(p("ln1.bias"), &[c]);
            let ln2_w = b.add(p("ln2.weight"), &[c]);
            let ln2_b = b.add(p("ln2.bias"), &[c]);
            let x_r = b.add(p("att.x_r"), &[c]);
            let x_w = b.add(p("att.x_w"), &[c]);
            let x_k = b.add(p("att.x_k"), &[c]);
            let x_v = b.add(p("att.x_v"), &[c]);
            let x_a = b.add(p("att.x_a"), &[c]);
            let x_g = b.add(p("att.x_g"), &[c]);
            let w0 = b.add(p("att.w0"), &[c]);
            let w1 = b.add(p("att.w1"), &[c, cfg.d_decay()]);
            let w2 = b.add(p("att.w2"), &[cfg.d_decay(), c]);
            let a0 = b.add(p("att.a0"), &[c]);
            let a1 = b.add(p("att.a1"), &[c, cfg.d_aaa()]);
            let a2 = b.add(p("att.a2"), &[cfg.d_aaa(), c]);
            let (v0, v1, v2) = if l > 0 {
                (
                    Some(b.add(p("att.v0"), &[c])),
                    Some(b.add(p("att.v1"), &[c, cfg.d_mv()])),
                    Some(b.add(p("att.v2"), &[cfg.d_mv(), c])),
                )
            } else {
                (None, None, None)
            };
            let g1 = b.add(p("att.g1"), &[c, cfg.d_gate()]);
            let g2 = b.add(p("att.g2"), &[cfg.d_gate(), c]);
            let k_k = b.add(p("att.k_k"), &[c]);
            let k_a = b.add(p("att.k_a"), &[c]);
            let r_k = b.add(p("att.r_k"), &[cfg.n_heads(), cfg.head_size]);
            let wr = b.add(p("att.receptance"), &[c, c]);
            let wk = b.add(p("att.key"), &[c, c]);
            let wv = b.add(p("att.value"), &[c, c]);
            let wo = b.add(p("att.output"), &[c, c]);
            let lnx_w = b.add(p("att.ln_x.weight"), &[c]);
            let lnx_b = b.add(p("att.ln_x.bias"), &[c]);
            let ffn_x_k = b.add(p("ffn.x_k"), &[c]);
            let ffn_key = b.add(p("ffn.key"), &[c, cfg.d_ffn]);
            let ffn_value = b.add(p("ffn.value"), &[cfg.d_ffn, c]);
            layers.push(LayerOffsets {
                ln1_w,
                ln1_b,
                ln2_w,
                ln2_b,
                x_r,
                x_w,
                x_k,
                x_v,
                x_a,
                x_g,
                w0,
                w1,
                w2,
                a0,
                a1,
                a2,
                v0,
                v1,
                v2,
                g1,
                g2,
                k_k,
                k_a,
                r_k,
                wr,
                wk,
                wv,
                wo,
                lnx_w,
                lnx_b,
                ffn_x_k,
                ffn_key,
                ffn_value,
            });
        }
        let ln_out_w = b.add("ln_out.weight".into(), &[c]);
        let ln_out_b = b.add("ln_out.bias".into(), &[c]);
        let head = b.add("head".into(), &[c, cfg.vocab_size]);
        let index = b.tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        Self {
            emb,
            ln0_w,
            ln0_b,
            layers,
            ln_out_w,
            ln_out_b,
            head,
            total: b.next,
            tensors: b.tensors,
            index,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// True for tensors exempt from weight decay: norms, embeddings and the
    /// per-channel mixing/bias vectors.
    pub fn decays(&self, info: &TensorInfo) -> bool {
        info.shape.len() == 2 && info.name != "emb" && !info.name.ends_with("r_k")
    }
}

/// Recurrent state: per layer the time-mix shift vector, the channel-mix
/// shift vector and the WKV matrices (`heads × head_size × head_size`).
#[derive(Clone, Debug, PartialEq)]
pub struct State<F> {
    pub cfg: ModelConfig,
    pub data: Vec<F>,
}

impl<F: Real> State<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            cfg: *cfg,
            data: vec![F::zero(); cfg.state_len()],
        }
    }

    pub fn layer(&self, l: usize) -> &[F] {
        let n = self.cfg.state_layer_len();
        &self.data[l * n..(l + 1) * n]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [F] {
        let n = self.cfg.state_layer_len();
        &mut self.data[l * n..(l + 1) * n]
    }

    /// Range of the WKV block of layer `l` inside `data`.
    pub fn wkv_range(&self, l: usize) -> std::ops::Range<usize> {
        let n = self.cfg.state_layer_len();
        let c = self.cfg.d_model;
        l * n + 2 * c..(l + 1) * n
    }

    pub fn cast<G: Real>(&self) -> State<G> {
        State {
            cfg: self.cfg,
            data: self.data.iter().map(|&v| G::from(v).unwrap()).collect(),
        }
    }

    /// Bytes held by the state; independent of how many tokens it has seen.
    pub fn footprint_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<F>()
    }
}

/// What a training run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Full,
    /// Initial WKV matrices; shift vectors too when `shifts` is set.
    State { shifts: bool },
    Lora { rank: usize },
}

/// Model parameters.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub params: Vec<F>,
    layout: Arc<Layout>,
}

impl<F: Real> Model<F> {
    pub fn zeros(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        Ok(Self {
            cfg,
            params: vec![F::zero(); layout.total],
            layout: Arc::new(layout),
        })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<F>) -> Result<Self, ModelError> {
        let mut m = Self::zeros(cfg)?;
        if params.len() != m.params.len() {
            return Err(ModelError::Shape(format!(
                "{} parameters given, config needs {}",
                params.len(),
                m.params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout
            .tensor(name)
            .map(|t| &self.params[t.offset..t.offset + t.len()])
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg,
            params: self.params.iter().map(|&v| G::from(v).unwrap()).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// SHA-256 of the little-endian parameter bytes, hex encoded.
    pub fn params_hash(&self) -> String {
        hash_values(&self.params)
    }

    pub fn check_tokens(&self, ids: &[u32]) -> Result<(), ModelError> {
        match ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            Some(&id) => Err(ModelError::Token {
                id,
                size: self.cfg.vocab_size,
            }),
            None => Ok(()),
        }
    }
}

pub fn hash_values<F: Real>(values: &[F]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_f64().unwrap().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Trainable parameter count of a mode. LoRA counts `r (m + n)` per target
/// matrix.
pub fn count_trainable(cfg: &ModelConfig, mode: TrainMode) -> usize {
    match mode {
        TrainMode::Full => Layout::new(cfg).total,
        TrainMode::State { shifts } => {
            let wkv = cfg.n_layers * cfg.n_heads() * cfg.head_size * cfg.head_size;
            if shifts {
                wkv + cfg.n_layers * 2 * cfg.d_model
            } else {
                wkv
            }
        }
        TrainMode::Lora { rank } => lora::lora_shapes(cfg).iter().map(|(_, m, n)| rank * (m + n)).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_dims_follow_width() {
        let c = ModelConfig::reference(16000);
        assert_eq!(c.n_heads(), 6);
        assert_eq!((c.d_decay(), c.d_aaa(), c.d_mv(), c.d_gate()), (64, 64, 32, 96));
        let tiny = ModelConfig {
            n_layers: 2,
            d_model: 16,
            head_size: 8,
            d_ffn: 32,
            vocab_size: 30,
        };
        assert_eq!(tiny.d_decay(), 32);
    }

    #[test]
    fn state_counts() {
        let tiny = ModelConfig {
            n_layers: 2,
            d_model: 16,
            head_size: 8,
            d_ffn: 32,
            vocab_size: 30,
        };
        assert_eq!(count_trainable(&tiny, TrainMode::State { shifts: false }), 256);
        assert_eq!(count_trainable(&ModelConfig::reference(16000), TrainMode::State { shifts: false }), 294_912);
    }

    #[test]
    fn layout_is_contiguous() {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 32,
            head_size: 16,
            d_ffn: 64,
            vocab_size: 50,
        };
        let l = Layout::new(&cfg);
        let mut next = 0;
        for t in &l.tensors {
            assert_eq!(t.offset, next, "{}", t.name);
            next += t.len();
        }
        assert_eq!(next, l.total);
        assert!(l.tensor("blocks.0.att.v1").is_none());
        assert!(l.tensor("blocks.1.att.v1").is_some());
    }
}
