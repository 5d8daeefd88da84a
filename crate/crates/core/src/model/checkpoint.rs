//! Named-tensor files for weights, tuned states and adapters.
//!
//! Layout: magic `MRWKVCK1`, u32 header length, a JSON header, then for each
//! tensor a u16 name length, the UTF-8 name, a dtype byte (4 = f32, 8 = f64),
//! a u8 rank, u64 dims and little-endian data.

use std::io::{Read, Write};
use std::path::Path;

use serde_json::{json, Value};
use thiserror::Error;

use super::ops::{lit, Real};
use super::{LoraAdapter, LoraTarget, Model, ModelConfig, State};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MRWKVCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("header json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected a {expected} file, found {found}")]
    Kind { expected: &'static str, found: String },
    #[error(transparent)]
    Model(#[from] super::ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Stored width in bytes, 4 or 8.
    pub width: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub header: Value,
    pub tensors: Vec<TensorRecord>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(CheckpointError::Format(format!("{}: shape does not match data", t.name)));
            }
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.width);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t.width {
                4 => t.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                8 => t.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
                w => return Err(CheckpointError::Format(format!("{}: unsupported width {w}", t.name))),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, at: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let header = serde_json::from_slice(cur.take(hlen)?)?;
        let mut tensors = Vec::new();
        while cur.at < bytes.len() {
            let nlen = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(nlen)?.to_vec()).map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
            let width = cur.take(1)?[0];
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Format(format!("{name}: shape overflows")))?;
            let data = match width {
                4 => cur
                    .take(len.checked_mul(4).ok_or_else(|| CheckpointError::Format("size overflow".into()))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                8 => cur
                    .take(len.checked_mul(8).ok_or_else(|| CheckpointError::Format("size overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                w => return Err(CheckpointError::Format(format!("{name}: unsupported width {w}"))),
            };
            tensors.push(TensorRecord { name, shape, data, width });
        }
        Ok(Self { header, tensors })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.at..e];
                self.at = e;
                Ok(s)
            }
            None => Err(CheckpointError::Format(format!("truncated at byte {}", self.at))),
        }
    }
}

/// Writes atomically through a temporary sibling file.
pub fn write_tensor_file(path: &Path, file: &TensorFile) -> Result<(), CheckpointError> {
    let bytes = file.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    TensorFile::from_bytes(&bytes)
}

fn header(kind: &str, cfg: &ModelConfig, extra: Value) -> Value {
    let mut h = json!({"version": 1, "kind": kind, "config": cfg});
    if let (Some(h), Value::Object(extra)) = (h.as_object_mut(), extra) {
        h.extend(extra);
    }
    h
}

fn parse_header(file: &TensorFile, expected: &'static str) -> Result<ModelConfig, CheckpointError> {
    let kind = file.header.get("kind").and_then(Value::as_str).unwrap_or("");
    if kind != expected {
        return Err(CheckpointError::Kind {
            expected,
            found: kind.to_string(),
        });
    }
    let cfg: ModelConfig = serde_json::from_value(file.header.get("config").cloned().unwrap_or(Value::Null))?;
    cfg.validate()?;
    Ok(cfg)
}

fn width<F: Real>() -> u8 {
    std::mem::size_of::<F>() as u8
}

fn record<F: Real>(name: &str, shape: Vec<usize>, data: &[F]) -> TensorRecord {
    TensorRecord {
        name: name.to_string(),
        shape,
        data: data.iter().map(|v| v.to_f64().unwrap()).collect(),
        width: width::<F>(),
    }
}

fn take<'a>(file: &'a TensorFile, name: &str, shape: &[usize]) -> Result<&'a TensorRecord, CheckpointError> {
    let t = file.get(name).ok_or_else(|| CheckpointError::Format(format!("missing tensor {name}")))?;
    if t.shape != shape {
        return Err(CheckpointError::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape)));
    }
    Ok(t)
}

impl<F: Real> Model<F> {
    pub fn to_tensor_file(&self) -> TensorFile {
        let tensors = self
            .layout
            .tensors
            .iter()
            .map(|t| record(&t.name, t.shape.clone(), &self.params[t.offset..t.offset + t.len()]))
            .collect();
        TensorFile {
            header: header("params", &self.cfg, json!({"param_count": self.params.len()})),
            tensors,
        }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self, CheckpointError> {
        let cfg = parse_header(file, "params")?;
        let mut m = Self::zeros(cfg)?;
        let layout = m.layout.clone();
        for info in &layout.tensors {
            let t = take(file, &info.name, &info.shape)?;
            for (dst, &v) in m.params[info.offset..info.offset + info.len()].iter_mut().zip(&t.data) {
                *dst = lit(v);
            }
        }
        Ok(m)
    }
}

impl<F: Real> State<F> {
    pub fn to_tensor_file(&self) -> TensorFile {
        let c = self.cfg;
        let mut tensors = Vec::new();
        for l in 0..c.n_layers {
            let layer = self.layer(l);
            let d = c.d_model;
            tensors.push(record(&format!("blocks.{l}.att_shift"), vec![d], &layer[..d]));
            tensors.push(record(&format!("blocks.{l}.ffn_shift"), vec![d], &layer[d..2 * d]));
            tensors.push(record(&format!("blocks.{l}.wkv"), vec![c.n_heads(), c.head_size, c.head_size], &layer[2 * d..]));
        }
        TensorFile {
            header: header("state", &c, json!({})),
            tensors,
        }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self, CheckpointError> {
        let c = parse_header(file, "state")?;
        let mut s = State::zeros(&c);
        let d = c.d_model;
        for l in 0..c.n_layers {
            let parts = [
                (format!("blocks.{l}.att_shift"), vec![d], 0),
                (format!("blocks.{l}.ffn_shift"), vec![d], d),
                (format!("blocks.{l}.wkv"), vec![c.n_heads(), c.head_size, c.head_size], 2 * d),
            ];
            let layer = s.layer_mut(l);
            for (name, shape, at) in parts {
                let t = take(file, &name, &shape)?;
                for (dst, &v) in layer[at..at + t.data.len()].iter_mut().zip(&t.data) {
                    *dst = lit(v);
                }
            }
        }
        Ok(s)
    }
}

impl<F: Real> LoraAdapter<F> {
    pub fn to_tensor_file(&self, cfg: &ModelConfig) -> TensorFile {
        let mut tensors = Vec::new();
        for t in &self.targets {
            let r = self.rank;
            tensors.push(record(&format!("{}.lora_a", t.name), vec![t.rows, r], &self.params[t.a_offset..t.a_offset + t.rows * r]));
            tensors.push(record(&format!("{}.lora_b", t.name), vec![r, t.cols], &self.params[t.b_offset..t.b_offset + r * t.cols]));
        }
        TensorFile {
            header: header("lora", cfg, json!({"rank": self.rank, "alpha": self.alpha})),
            tensors,
        }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<(ModelConfig, Self), CheckpointError> {
        let cfg = parse_header(file, "lora")?;
        let rank = file.header.get("rank").and_then(Value::as_u64).unwrap_or(0) as usize;
        let alpha = file.header.get("alpha").and_then(Value::as_f64).unwrap_or(0.0);
        let mut ad = LoraAdapter::<F>::new(&cfg, rank, alpha, 0)?;
        let targets: Vec<LoraTarget> = ad.targets.clone();
        for t in &targets {
            let a = take(file, &format!("{}.lora_a", t.name), &[t.rows, rank])?;
            let b = take(file, &format!("{}.lora_b", t.name), &[rank, t.cols])?;
            for (dst, &v) in ad.params[t.a_offset..].iter_mut().zip(&a.data) {
                *dst = lit(v);
            }
            for (dst, &v) in ad.params[t.b_offset..].iter_mut().zip(&b.data) {
                *dst = lit(v);
            }
        }
        Ok((cfg, ad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_state_and_adapter_round_trip() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            head_size: 8,
            d_ffn: 32,
            vocab_size: 30,
        };
        let m = Model::<f64>::random(cfg, 1, 0.5).unwrap();
        let back = Model::<f64>::from_tensor_file(&TensorFile::from_bytes(&m.to_tensor_file().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        let mut s = State::<f64>::zeros(&cfg);
        s.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.01);
        assert_eq!(State::<f64>::from_tensor_file(&s.to_tensor_file()).unwrap(), s);
        let mut ad = LoraAdapter::<f64>::new(&cfg, 2, 2.0, 4).unwrap();
        ad.params.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f64);
        let (c2, back) = LoraAdapter::<f64>::from_tensor_file(&ad.to_tensor_file(&cfg)).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(back.params, ad.params);
        assert!(matches!(State::<f64>::from_tensor_file(&m.to_tensor_file()), Err(CheckpointError::Kind { .. })));
    }

    #[test]
    fn round_trip_and_truncation() {
        let f = TensorFile {
            header: serde_json::json!({"kind": "params"}),
            tensors: vec![
                TensorRecord {
                    name: "a".into(),
                    shape: vec![2, 2],
                    data: vec![1.0, -2.5, 3.25, 0.0],
                    width: 4,
                },
                TensorRecord {
                    name: "b".into(),
                    shape: vec![1],
                    data: vec![0.1],
                    width: 8,
                },
            ],
        };
        let bytes = f.to_bytes().unwrap();
        assert_eq!(TensorFile::from_bytes(&bytes).unwrap(), f);
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(TensorFile::from_bytes(b"MRWKVCK2").is_err());
    }
}
