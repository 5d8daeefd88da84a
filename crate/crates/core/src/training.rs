//! Optimization loops: pretraining, initial-state tuning and LoRA finetuning.
//!
//! All three share one loop: examples are drawn from an [`ExampleSource`]
//! once per epoch (so corpora can be reshuffled and reprocessed), grouped
//! into batches, and each batch's mean gradient goes through Adam with
//! decoupled weight decay.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::Score;
use crate::model::{count_trainable, Layout, LoraAdapter, Model, ModelError, Need, State, TrainMode};
use crate::prompt::make_training_example;
use crate::rng::substream;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("loss became non-finite at step {step}; parameters restored to the last finite step")]
    Diverged { step: usize },
    #[error("the example source produced no usable examples")]
    NoData,
}

/// One training sequence with its loss mask (see [`Model::loss_and_grads`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Example {
    /// Every position after the first is a target.
    pub fn full(ids: Vec<u32>) -> Self {
        let mask = (0..ids.len()).map(|t| t > 0).collect();
        Self { ids, mask }
    }

    pub fn has_targets(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

/// Splits a long sequence into windows of `len` tokens overlapping by one,
/// so every transition appears as a target exactly once.
pub fn windows(ids: &[u32], len: usize) -> Vec<Example> {
    let len = len.max(2);
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + len).min(ids.len());
        out.push(Example::full(ids[start..end].to_vec()));
        start = end - 1;
    }
    out
}

pub trait ExampleSource {
    fn epoch(&mut self, epoch: usize) -> Vec<Example>;
}

/// A fixed list of examples, shuffled each epoch.
pub struct FixedSource {
    pub examples: Vec<Example>,
    pub seed: u64,
}

impl ExampleSource for FixedSource {
    fn epoch(&mut self, epoch: usize) -> Vec<Example> {
        let mut ex = self.examples.clone();
        ex.shuffle(&mut substream(self.seed, &[1, epoch as u64]));
        ex
    }
}

/// Scores turned into fresh Bar-Fill training prompts every epoch: new
/// transposition, track order, infill region and context each time.
pub struct ScoreSource<'a> {
    pub scores: &'a [Score],
    pub vocab: &'a Vocabulary,
    pub budget: usize,
    pub seed: u64,
    /// Score every token instead of only the infill span.
    pub full_sequence_loss: bool,
}

impl ExampleSource for ScoreSource<'_> {
    fn epoch(&mut self, epoch: usize) -> Vec<Example> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.shuffle(&mut substream(self.seed, &[2, epoch as u64]));
        order
            .into_iter()
            .filter_map(|i| {
                let mut rng = substream(self.seed, &[3, epoch as u64, i as u64]);
                let ex = make_training_example(&self.scores[i], &mut rng, self.budget, self.vocab).ok()?;
                let mask = if self.full_sequence_loss {
                    (0..ex.ids.len()).map(|t| t > 0).collect()
                } else {
                    ex.target_mask()
                };
                Some(Example { ids: ex.ids, mask })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TuneMode {
    Pretrain,
    /// Initial WKV matrices, plus the token-shift vectors when `shifts`.
    State { shifts: bool },
    Lora { rank: usize, alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TuneMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Wall-clock budget in seconds; the loop stops before the first step
    /// that would start after it.
    pub time_budget: Option<f64>,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainConfig {
    /// Base training: lr 1e-4, weight decay 0.1, batch 16, length 2048.
    pub fn pretrain() -> Self {
        Self {
            mode: TuneMode::Pretrain,
            lr: 1e-4,
            weight_decay: 0.1,
            epochs: 24,
            batch_size: 16,
            seq_len: 2048,
            seed: 42,
            time_budget: None,
            clip: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Initial-state tuning: lr 5e-2 for 16 epochs, clipped at norm 1.
    pub fn state() -> Self {
        Self {
            mode: TuneMode::State { shifts: false },
            lr: 5e-2,
            weight_decay: 0.0,
            epochs: 16,
            clip: Some(1.0),
            ..Self::pretrain()
        }
    }

    /// LoRA finetuning with `r = alpha` at lr 5e-4.
    pub fn lora(rank: usize) -> Self {
        Self {
            mode: TuneMode::Lora {
                rank,
                alpha: rank as f64,
            },
            lr: 5e-4,
            weight_decay: 0.0,
            epochs: 16,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.seq_len == 0 {
            return bad("seq_len must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if let TuneMode::Lora { rank: 0, .. } = self.mode {
            return bad("LoRA rank must be positive");
        }
        Ok(())
    }

    pub fn train_mode(&self) -> TrainMode {
        match self.mode {
            TuneMode::Pretrain => TrainMode::Full,
            TuneMode::State { shifts } => TrainMode::State { shifts },
            TuneMode::Lora { rank, .. } => TrainMode::Lora { rank },
        }
    }
}

/// One JSONL log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs_completed: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub trainable: usize,
    pub stopped_by_budget: bool,
    pub wall_time: f64,
}

/// Adam with decoupled weight decay applied to the entries flagged in
/// `decay_mask` (all entries when the mask is empty).
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64, decay_mask: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            if weight_decay > 0.0 && decay_mask.get(i).copied().unwrap_or(decay_mask.is_empty()) {
                params[i] -= lr * weight_decay * params[i];
            }
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

fn clip(grads: &mut [f64], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if let Some(max) = max_norm {
        if norm > max && norm > 0.0 {
            let s = max / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Truncates an example to the configured length, dropping it when no
/// target survives.
fn fit(ex: &Example, seq_len: usize) -> Option<Example> {
    let n = ex.ids.len().min(seq_len);
    let cut = Example {
        ids: ex.ids[..n].to_vec(),
        mask: ex.mask[..n].to_vec(),
    };
    cut.has_targets().then_some(cut)
}

/// Shared loop. `step` receives a batch and returns its mean loss after
/// updating whatever it trains; `snapshot`/`restore` implement the
/// divergence rollback.
fn run_loop(
    cfg: &TrainConfig,
    source: &mut dyn ExampleSource,
    trainable: usize,
    log: &mut dyn FnMut(&StepLog),
    step: &mut dyn FnMut(&[Example]) -> Result<(f64, f64), TrainError>,
    snapshot: &mut dyn FnMut(),
    restore: &mut dyn FnMut(),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut report = TrainReport {
        steps: 0,
        epochs_completed: 0,
        first_loss: None,
        last_loss: None,
        trainable,
        stopped_by_budget: false,
        wall_time: 0.0,
    };
    let mut any = false;
    snapshot();
    'outer: for epoch in 0..cfg.epochs {
        let examples: Vec<Example> = source.epoch(epoch).iter().filter_map(|e| fit(e, cfg.seq_len)).collect();
        if examples.is_empty() {
            continue;
        }
        any = true;
        for batch in examples.chunks(cfg.batch_size) {
            if cfg.time_budget.is_some_and(|b| start.elapsed().as_secs_f64() >= b) {
                report.stopped_by_budget = true;
                break 'outer;
            }
            let (loss, grad_norm) = step(batch)?;
            if !loss.is_finite() || !grad_norm.is_finite() {
                restore();
                return Err(TrainError::Diverged { step: report.steps });
            }
            snapshot();
            report.steps += 1;
            report.first_loss.get_or_insert(loss);
            report.last_loss = Some(loss);
            log(&StepLog {
                step: report.steps,
                epoch,
                loss,
                lr: cfg.lr,
                wall_time: start.elapsed().as_secs_f64(),
                grad_norm,
            });
        }
        report.epochs_completed = epoch + 1;
    }
    report.wall_time = start.elapsed().as_secs_f64();
    if !any {
        return Err(TrainError::NoData);
    }
    Ok(report)
}

/// Mean loss and summed gradients over a batch.
fn batch_grads(
    model: &Model<f64>,
    batch: &[Example],
    state0: Option<&State<f64>>,
    need: Need,
) -> Result<(f64, Vec<f64>, Vec<f64>), TrainError> {
    let mut loss = 0.0;
    let mut gp = Vec::new();
    let mut gs = Vec::new();
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let g = model.loss_and_grads(&ex.ids, &ex.mask, state0, need)?;
        loss += g.loss * scale;
        for (acc, part) in [(&mut gp, g.params), (&mut gs, g.state)] {
            if acc.is_empty() {
                *acc = part.into_iter().map(|v| v * scale).collect();
            } else {
                acc.iter_mut().zip(part).for_each(|(a, v)| *a += v * scale);
            }
        }
    }
    Ok((loss, gp, gs))
}

fn decay_mask(layout: &Layout) -> Vec<bool> {
    let mut mask = vec![false; layout.total];
    for t in layout.tensors.iter().filter(|t| layout.decays(t)) {
        mask[t.offset..t.offset + t.len()].iter_mut().for_each(|m| *m = true);
    }
    mask
}

/// Trains every parameter in place. On divergence the parameters are left at
/// the last finite step.
pub fn pretrain(
    model: &mut Model<f64>,
    source: &mut dyn ExampleSource,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainReport, TrainError> {
    if cfg.mode != TuneMode::Pretrain {
        return Err(TrainError::Config("pretrain needs the pretrain mode".into()));
    }
    let mask = decay_mask(model.layout());
    let mut adam = Adam::new(model.params.len(), cfg.beta1, cfg.beta2, cfg.eps);
    let trainable = model.param_count();
    let cell = std::cell::RefCell::new((model, Vec::<f64>::new()));
    run_loop(
        cfg,
        source,
        trainable,
        log,
        &mut |batch| {
            let mut guard = cell.borrow_mut();
            let m = &mut guard.0;
            let (loss, mut g, _) = batch_grads(m, batch, None, Need::PARAMS)?;
            let norm = clip(&mut g, cfg.clip);
            if loss.is_finite() && norm.is_finite() {
                adam.step(&mut m.params, &g, cfg.lr, cfg.weight_decay, &mask);
            }
            Ok((loss, norm))
        },
        &mut || {
            let mut guard = cell.borrow_mut();
            let (m, snap) = &mut *guard;
            snap.clone_from(&m.params);
        },
        &mut || {
            let mut guard = cell.borrow_mut();
            let (m, snap) = &mut *guard;
            m.params.clone_from(snap);
        },
    )
}

/// Tunes the initial state from zeros with the parameters frozen.
pub fn state_tune(
    model: &Model<f64>,
    source: &mut dyn ExampleSource,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(State<f64>, TrainReport), TrainError> {
    let TuneMode::State { shifts } = cfg.mode else {
        return Err(TrainError::Config("state_tune needs the state mode".into()));
    };
    let c = model.cfg;
    let mut trainable_mask = vec![false; c.state_len()];
    for l in 0..c.n_layers {
        let n = c.state_layer_len();
        let from = if shifts { 0 } else { 2 * c.d_model };
        trainable_mask[l * n + from..(l + 1) * n].iter_mut().for_each(|m| *m = true);
    }
    let mut adam = Adam::new(c.state_len(), cfg.beta1, cfg.beta2, cfg.eps);
    let trainable = count_trainable(&c, cfg.train_mode());
    let cell = std::cell::RefCell::new((State::zeros(&c), Vec::<f64>::new()));
    let report = run_loop(
        cfg,
        source,
        trainable,
        log,
        &mut |batch| {
            let mut guard = cell.borrow_mut();
            let state = &mut guard.0;
            let (loss, _, mut g) = batch_grads(model, batch, Some(state), Need::STATE)?;
            g.iter_mut().zip(&trainable_mask).for_each(|(v, &m)| {
                if !m {
                    *v = 0.0;
                }
            });
            let norm = clip(&mut g, cfg.clip);
            if loss.is_finite() && norm.is_finite() {
                adam.step(&mut state.data, &g, cfg.lr, 0.0, &[]);
            }
            Ok((loss, norm))
        },
        &mut || {
            let mut guard = cell.borrow_mut();
            let (s, snap) = &mut *guard;
            snap.clone_from(&s.data);
        },
        &mut || {
            let mut guard = cell.borrow_mut();
            let (s, snap) = &mut *guard;
            s.data.clone_from(snap);
        },
    )?;
    Ok((cell.into_inner().0, report))
}

/// Trains a fresh adapter against frozen base weights and an optional frozen
/// initial state.
pub fn lora_tune(
    model: &Model<f64>,
    state0: Option<&State<f64>>,
    source: &mut dyn ExampleSource,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(LoraAdapter<f64>, TrainReport), TrainError> {
    let TuneMode::Lora { rank, alpha } = cfg.mode else {
        return Err(TrainError::Config("lora_tune needs the lora mode".into()));
    };
    cfg.validate()?;
    let adapter = LoraAdapter::new(&model.cfg, rank, alpha, cfg.seed)?;
    let mut adam = Adam::new(adapter.param_count(), cfg.beta1, cfg.beta2, cfg.eps);
    let trainable = adapter.param_count();
    let cell = std::cell::RefCell::new((adapter, Vec::<f64>::new()));
    let report = run_loop(
        cfg,
        source,
        trainable,
        log,
        &mut |batch| {
            let mut guard = cell.borrow_mut();
            let ad = &mut guard.0;
            let merged = ad.merge(model)?;
            let (loss, gp, _) = batch_grads(&merged, batch, state0, Need::PARAMS)?;
            let mut g = ad.grads(model.layout(), &gp);
            let norm = clip(&mut g, cfg.clip);
            if loss.is_finite() && norm.is_finite() {
                adam.step(&mut ad.params, &g, cfg.lr, cfg.weight_decay, &[]);
            }
            Ok((loss, norm))
        },
        &mut || {
            let mut guard = cell.borrow_mut();
            let (a, snap) = &mut *guard;
            snap.clone_from(&a.params);
        },
        &mut || {
            let mut guard = cell.borrow_mut();
            let (a, snap) = &mut *guard;
            a.params.clone_from(snap);
        },
    )?;
    Ok((cell.into_inner().0, report))
}

/// Mean per-example loss over `examples`, computed in f64 so small
/// differences between variants are resolved.
pub fn evaluate(model: &Model<f64>, state0: Option<&State<f64>>, examples: &[Example]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ex in examples.iter().filter(|e| e.has_targets()) {
        total += model.sequence_loss(&ex.ids, &ex.mask, state0)?;
        n += 1;
    }
    if n == 0 {
        return Err(TrainError::NoData);
    }
    Ok(total / n as f64)
}

/// Mean cross-entropy per target token over `examples`.
pub fn evaluate_tokens(model: &Model<f64>, state0: Option<&State<f64>>, examples: &[Example]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ex in examples.iter().filter(|e| e.has_targets()) {
        let k = ex.mask.iter().filter(|&&m| m).count();
        total += model.sequence_loss(&ex.ids, &ex.mask, state0)? * k as f64;
        n += k;
    }
    if n == 0 {
        return Err(TrainError::NoData);
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_every_transition_once() {
        let ids: Vec<u32> = (0..10).collect();
        let w = windows(&ids, 4);
        let targets: usize = w.iter().map(|e| e.mask.iter().filter(|&&m| m).count()).sum();
        assert_eq!(targets, 9);
        assert_eq!(w[0].ids, vec![0, 1, 2, 3]);
        assert_eq!(w[1].ids, vec![3, 4, 5, 6]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        let mut a = Adam::new(2, 0.9, 0.999, 1e-8);
        a.step(&mut p, &[0.5, -2.0], 0.1, 0.0, &[]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
        let mut q = vec![1.0];
        let mut a = Adam::new(1, 0.9, 0.999, 1e-8);
        a.step(&mut q, &[0.0], 0.1, 0.5, &[true]);
        assert!((q[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = TrainConfig::pretrain();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::pretrain();
        c.seq_len = 0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::lora(0).validate().is_err());
    }
}
