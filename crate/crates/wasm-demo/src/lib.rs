//! Browser bindings. Each export takes and returns JSON strings; the pure
//! `*_json` functions behind them are what the native tests exercise.

use mrwkv_core::metrics::{evaluate_pair, groove_pattern, GrooveGrid, MetricConfig};
use mrwkv_core::midi::{bar_grid, Note, Program, Score, Track};
use mrwkv_core::prompt::compute_controls;
use mrwkv_core::sampler::{filter_logits, SamplerConfig};
use mrwkv_core::tokenizer::{encode_base, BaseVocab, TokenConfig};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

const TPQ: u16 = 480;
const BAR: u32 = 4 * TPQ as u32;

#[derive(Deserialize)]
struct SamplerInput {
    logits: Vec<f64>,
    #[serde(default)]
    history: Vec<u32>,
    #[serde(default)]
    forbidden: Vec<usize>,
    #[serde(flatten)]
    config: SamplerConfig,
}

/// Probabilities after each processing stage, so the page can plot how the
/// distribution narrows.
#[derive(Serialize)]
struct SamplerOutput {
    softmax: Vec<f64>,
    filtered: Vec<f64>,
    kept: usize,
}

pub fn sampler_json(input: &str) -> Result<String, String> {
    let inp: SamplerInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    let mut forbidden = vec![false; inp.logits.len()];
    for &i in &inp.forbidden {
        if let Some(f) = forbidden.get_mut(i) {
            *f = true;
        }
    }
    let softmax = filter_logits(&inp.logits, &[], &SamplerConfig::identity(), &[]).map_err(|e| e.to_string())?;
    let filtered = filter_logits(&inp.logits, &inp.history, &inp.config, &forbidden).map_err(|e| e.to_string())?;
    let kept = filtered.iter().filter(|&&p| p > 0.0).count();
    serde_json::to_string(&SamplerOutput { softmax, filtered, kept }).map_err(|e| e.to_string())
}

/// A note in a 4/4 bar at 480 ticks per quarter.
#[derive(Clone, Copy, Deserialize)]
struct BarNote {
    pitch: u8,
    onset: u32,
    duration: u32,
    #[serde(default = "default_velocity")]
    velocity: u8,
}

fn default_velocity() -> u8 {
    80
}

fn notes(v: &[BarNote]) -> Vec<Note> {
    v.iter().map(|n| Note::new(n.pitch, n.velocity, n.onset, n.duration.max(1))).collect()
}

#[derive(Deserialize)]
struct CompareInput {
    original: Vec<BarNote>,
    infill: Vec<BarNote>,
    #[serde(default = "one")]
    bars: u32,
}

fn one() -> u32 {
    1
}

#[derive(Serialize)]
struct CompareOutput {
    cp: f64,
    gs: f64,
    pche: Option<f64>,
    f1: f64,
    groove_original: Vec<bool>,
    groove_infill: Vec<bool>,
}

pub fn compare_json(input: &str) -> Result<String, String> {
    let inp: CompareInput = serde_json::from_str(input).map_err(|e| e.to_string())?;
    if inp.bars == 0 || inp.bars > 16 {
        return Err("bars must be 1..=16".into());
    }
    let bars: Vec<(u32, u32)> = (0..inp.bars).map(|b| (b * BAR, (b + 1) * BAR)).collect();
    let (o, i) = (notes(&inp.original), notes(&inp.infill));
    let cfg = TokenConfig::default();
    let m = evaluate_pair(&o, &i, &bars, TPQ, &cfg, &MetricConfig::default()).map_err(|e| e.to_string())?;
    let out = CompareOutput {
        cp: m.cp,
        gs: m.gs,
        pche: m.pche,
        f1: m.f1,
        groove_original: groove_pattern(&o, bars[0], TPQ, GrooveGrid::Sixteen, &cfg),
        groove_infill: groove_pattern(&i, bars[0], TPQ, GrooveGrid::Sixteen, &cfg),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct TokenizeOutput {
    tokens: Vec<String>,
    controls: Option<mrwkv_core::prompt::AttributeControls>,
}

/// REMI tokens of a one-track piano score holding the given notes.
pub fn tokenize_json(input: &str) -> Result<String, String> {
    let v: Vec<BarNote> = serde_json::from_str(input).map_err(|e| e.to_string())?;
    let mut score = Score::new(TPQ);
    let mut track = Track::new(Program::Melodic(0));
    track.notes = notes(&v);
    track.normalize();
    score.tracks.push(track);
    let base = BaseVocab::new(TokenConfig::default());
    let (ids, _) = encode_base(&score, &base).map_err(|e| e.to_string())?;
    let toks = base.decode(&ids[0]).map_err(|e| e.to_string())?;
    let grid = bar_grid(&score).map_err(|e| e.to_string())?;
    let first: Vec<Note> = score.tracks[0].notes.iter().filter(|n| n.onset < grid[0].1).copied().collect();
    Ok(serde_json::to_string(&TokenizeOutput {
        tokens: toks.iter().map(|t| t.to_string()).collect(),
        controls: compute_controls(&first, TPQ, base.config()).ok(),
    })
    .map_err(|e| e.to_string())?)
}

#[wasm_bindgen]
pub fn sampler(input: &str) -> Result<String, JsError> {
    sampler_json(input).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn compare(input: &str) -> Result<String, JsError> {
    compare_json(input).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn tokenize(input: &str) -> Result<String, JsError> {
    tokenize_json(input).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn sampler_narrows_with_top_k() {
        let out: Value = serde_json::from_str(
            &sampler_json(r#"{"logits":[2.0,1.0,0.5,0.0,-1.0],"top_k":2,"top_p":1.0,"repetition_penalty":1.0}"#).unwrap(),
        )
        .unwrap();
        assert_eq!(out["kept"], 2);
        let s: f64 = out["softmax"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_bars_compare_perfectly() {
        let bar = r#"[{"pitch":60,"onset":0,"duration":480},{"pitch":64,"onset":480,"duration":480}]"#;
        let out: Value = serde_json::from_str(&compare_json(&format!(r#"{{"original":{bar},"infill":{bar}}}"#)).unwrap()).unwrap();
        assert_eq!(out["cp"], 1.0);
        assert_eq!(out["gs"], 1.0);
        assert_eq!(out["pche"], 0.0);
        assert_eq!(out["f1"], 1.0);
    }

    #[test]
    fn tokenize_lists_remi_tokens() {
        let out: Value = serde_json::from_str(&tokenize_json(r#"[{"pitch":60,"onset":0,"duration":480}]"#).unwrap()).unwrap();
        let toks: Vec<&str> = out["tokens"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        assert!(toks.contains(&"Pitch_60"), "{toks:?}");
        assert_eq!(out["controls"]["density"], 1);
    }

    #[test]
    fn bad_input_is_an_error() {
        assert!(sampler_json("{").is_err());
        assert!(compare_json(r#"{"original":[],"infill":[],"bars":0}"#).is_err());
    }
}
