//! Experiment orchestration: end-to-end infilling of a score, objective
//! evaluation over N-bar tasks, the sampling ablation and the style-split
//! finetuning comparison.
//!
//! Every random choice derives from `(experiment seed, example index)`, so a
//! report is reproducible from its config alone and independent of the
//! worker count.

pub mod stats;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{attribute_adherence, evaluate_pair, Adherence, MetricConfig, MetricError, MetricReport, PairMetrics};
use crate::midi::{bar_grid, MidiError, Note, Score};
use crate::model::{Model, State};
use crate::prompt::{
    bar_notes, build_prompt, compute_controls, splice_back, AttributeControls, ControlOverrides, Mode, PromptError,
    PromptSpec,
};
use crate::rng::substream;
use crate::sampler::{infill, InfillOutput, InfillRequest, SampleError, SamplerConfig};
use crate::tokenizer::{quantize_score, TokenizerError, Vocabulary};
use crate::training::{evaluate, lora_tune, state_tune, Example, ExampleSource, ScoreSource, TrainConfig, TrainError, TuneMode};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// An `N`-bar infilling task with `C` context bars on each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub n_bars: usize,
    pub context: usize,
}

impl Task {
    /// The evaluation protocol's task for `n` bars: `C = 4N`.
    pub fn new(n_bars: usize) -> Self {
        Self {
            n_bars,
            context: 4 * n_bars,
        }
    }

    /// The three reported tasks: 2, 4 and 8 bars.
    pub fn protocol() -> [Task; 3] {
        [Task::new(2), Task::new(4), Task::new(8)]
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_bars == 0 {
            return Err(HarnessError::Spec("a task needs at least one bar".into()));
        }
        if self.context != 4 * self.n_bars {
            return Err(HarnessError::Spec(format!(
                "context {} must be 4N = {} for N = {}",
                self.context,
                4 * self.n_bars,
                self.n_bars
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Variant {
    Base,
    State,
    Lora { rank: usize },
    StateLora { rank: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub task: Task,
    pub variant: Variant,
    pub sampler: SamplerConfig,
    pub metrics: MetricConfig,
    /// Scores drawn from the test set, in order; 0 takes all of them.
    pub n_examples: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Experiment {
    pub fn new(task: Task, variant: Variant) -> Self {
        Self {
            task,
            variant,
            sampler: SamplerConfig::default(),
            metrics: MetricConfig::default(),
            n_examples: 0,
            seed: 42,
            workers: 1,
        }
    }
}

/// Where to infill and which controls to ask for. Unset control fields are
/// computed from the original bar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRequest {
    pub track: usize,
    pub start_bar: usize,
    pub n_bars: usize,
    pub context: usize,
    #[serde(default)]
    pub controls: Vec<ControlOverrides>,
    /// Track serialization order; defaults to score order.
    #[serde(default)]
    pub track_order: Option<Vec<usize>>,
}

/// Resolves a request against a (quantized) score into a prompt spec.
pub fn resolve_spec(score: &Score, req: &RegionRequest, vocab: &Vocabulary) -> Result<PromptSpec, HarnessError> {
    let grid = bar_grid(score)?;
    if req.track >= score.tracks.len() {
        return Err(HarnessError::Spec(format!("track {} of {}", req.track, score.tracks.len())));
    }
    if req.n_bars == 0 || req.start_bar + req.n_bars > grid.len() {
        return Err(HarnessError::Spec(format!(
            "bars {}..{} outside a score of {} bars",
            req.start_bar,
            req.start_bar + req.n_bars,
            grid.len()
        )));
    }
    if !req.controls.is_empty() && req.controls.len() != req.n_bars {
        return Err(HarnessError::Spec(format!("{} control groups for {} bars", req.controls.len(), req.n_bars)));
    }
    let cfg = vocab.base().config();
    let controls = (0..req.n_bars)
        .map(|i| {
            let notes = bar_notes(&score.tracks[req.track], grid[req.start_bar + i]);
            let computed = compute_controls(&notes, score.ticks_per_quarter, cfg).ok();
            req.controls.get(i).copied().unwrap_or_default().resolve(computed, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spec = PromptSpec {
        track: req.track,
        start_bar: req.start_bar,
        n_bars: req.n_bars,
        context: req.context,
        controls,
        track_order: req.track_order.clone().unwrap_or_else(|| (0..score.tracks.len()).collect()),
    };
    spec.validate(score, grid.len())?;
    Ok(spec)
}

/// Produces an infilled score for a prompt spec.
pub trait Generator: Sync {
    fn generate(&self, score: &Score, spec: &PromptSpec, sampler: &SamplerConfig) -> Result<Generated, HarnessError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub score: Score,
    pub output: Option<InfillOutput>,
}

/// Returns the score unchanged, for pipeline checks.
pub struct Identity;

impl Generator for Identity {
    fn generate(&self, score: &Score, _: &PromptSpec, _: &SamplerConfig) -> Result<Generated, HarnessError> {
        Ok(Generated {
            score: score.clone(),
            output: None,
        })
    }
}

/// A loaded model ready to infill. Shared read-only between sessions.
#[derive(Clone, Debug)]
pub struct Engine {
    pub model: Model<f32>,
    pub state: Option<State<f32>>,
    pub vocab: Vocabulary,
    pub variant: Variant,
}

impl Engine {
    /// Infills `spec` in `score`. The prompt is built from the quantized
    /// score; the result is spliced into `score` itself, so everything outside
    /// the region is left byte-for-byte alone.
    pub fn infill_spec(&self, score: &Score, spec: &PromptSpec, sampler: &SamplerConfig) -> Result<Generated, HarnessError> {
        let q = quantize_score(score, self.vocab.base())?;
        let prompt = build_prompt(&q, spec, Mode::Infer, &self.vocab)?;
        let grid = bar_grid(&q)?;
        let ts = q.timesig_at(grid[spec.start_bar].0);
        let req = InfillRequest {
            prompt: &prompt.ids,
            n_bars: spec.n_bars,
            controls: &spec.controls,
            timesig: (ts.numerator, ts.denominator),
        };
        let out = infill(&self.model, self.state.as_ref(), &self.vocab, &req, sampler)?;
        let spliced = splice_back(score, spec, &out.fill, &self.vocab)?;
        Ok(Generated {
            score: spliced,
            output: Some(out),
        })
    }
}

impl Generator for Engine {
    fn generate(&self, score: &Score, spec: &PromptSpec, sampler: &SamplerConfig) -> Result<Generated, HarnessError> {
        self.infill_spec(score, spec, sampler)
    }
}

/// Controls recomputed from each bar of the region; `None` for empty bars.
pub fn realized_controls(score: &Score, track: usize, bars: &[(u32, u32)], vocab: &Vocabulary) -> Vec<Option<AttributeControls>> {
    bars.iter()
        .map(|&b| compute_controls(&bar_notes(&score.tracks[track], b), score.ticks_per_quarter, vocab.base().config()).ok())
        .collect()
}

fn region_notes(score: &Score, track: usize, bars: &[(u32, u32)]) -> Vec<Note> {
    let (lo, hi) = (bars[0].0, bars[bars.len() - 1].1);
    score.tracks[track].notes.iter().filter(|n| n.onset >= lo && n.onset < hi).copied().collect()
}

/// Start of a uniformly drawn window of `n` bars that are all non-empty.
pub fn pick_region(nonempty: &[bool], n: usize, rng: &mut crate::rng::Rng) -> Option<usize> {
    let starts: Vec<usize> = (0..=nonempty.len().saturating_sub(n))
        .filter(|&s| s + n <= nonempty.len() && nonempty[s..s + n].iter().all(|&b| b))
        .collect();
    starts.choose(rng).copied()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub index: usize,
    pub track: usize,
    pub start_bar: usize,
    pub metrics: PairMetrics,
    pub adherence: Adherence,
    pub early_stops: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: Experiment,
    pub report: MetricReport,
    pub examples: Vec<EvalExample>,
    pub failures: Vec<EvalFailure>,
}

/// Maps `f` over `0..n` on `workers` threads; item `i` always goes to worker
/// `i % workers` and results come back in index order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|v| v.expect("every index produced")).collect()
}

fn eval_one(
    gen: &dyn Generator,
    score: &Score,
    index: usize,
    exp: &Experiment,
    vocab: &Vocabulary,
) -> Result<Option<EvalExample>, HarnessError> {
    let q = quantize_score(score, vocab.base())?;
    let grid = bar_grid(&q)?;
    let n = exp.task.n_bars;
    let mut rng = substream(exp.seed, &[11, index as u64]);
    let mut tracks: Vec<usize> = (0..q.tracks.len()).collect();
    tracks.shuffle(&mut rng);
    let Some((track, start)) = tracks.into_iter().find_map(|t| {
        let nonempty: Vec<bool> = grid.iter().map(|&b| !bar_notes(&q.tracks[t], b).is_empty()).collect();
        pick_region(&nonempty, n, &mut rng).map(|s| (t, s))
    }) else {
        return Ok(None);
    };
    let req = RegionRequest {
        track,
        start_bar: start,
        n_bars: n,
        context: exp.task.context,
        controls: Vec::new(),
        track_order: None,
    };
    let spec = resolve_spec(&q, &req, vocab)?;
    let sampler = SamplerConfig {
        seed: rng.gen(),
        ..exp.sampler.clone()
    };
    let out = gen.generate(&q, &spec, &sampler)?;
    let bars = &grid[start..start + n];
    let original = region_notes(&q, track, bars);
    let generated = region_notes(&out.score, track, bars);
    let metrics = evaluate_pair(&original, &generated, bars, q.ticks_per_quarter, vocab.base().config(), &exp.metrics)?;
    let adherence = attribute_adherence(&spec.controls, &generated, bars, q.ticks_per_quarter, vocab.base().config())?;
    Ok(Some(EvalExample {
        index,
        track,
        start_bar: start,
        metrics,
        adherence,
        early_stops: out.output.map_or(0, |o| o.early_stops),
    }))
}

/// Masks a random `N`-bar region of every test score, infills, splices back
/// and scores the result. Scores without a fitting region are skipped;
/// generation failures are listed and excluded.
pub fn run_objective_eval(
    gen: &dyn Generator,
    scores: &[Score],
    exp: &Experiment,
    vocab: &Vocabulary,
) -> Result<EvalReport, HarnessError> {
    exp.task.validate()?;
    exp.sampler.validate()?;
    let n = if exp.n_examples == 0 { scores.len() } else { exp.n_examples.min(scores.len()) };
    let results = parallel_map(n, exp.workers, |i| eval_one(gen, &scores[i], i, exp, vocab));
    let mut examples = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(Some(e)) => examples.push(e),
            Ok(None) => {}
            Err(e) => failures.push(EvalFailure {
                index: i,
                error: e.to_string(),
            }),
        }
    }
    let adherence: Vec<Adherence> = examples.iter().map(|e| e.adherence).collect();
    let report = MetricReport::from_pairs(examples.iter().map(|e| e.metrics.clone()).collect(), &adherence);
    Ok(EvalReport {
        experiment: exp.clone(),
        report,
        examples,
        failures,
    })
}

/// One sampling configuration of the ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub name: String,
    /// Varied parameter; `None` for the defaults.
    pub parameter: Option<String>,
    pub value: Option<f64>,
    pub sampler: SamplerConfig,
}

/// The defaults followed by the eight one-at-a-time variations: temperature
/// {0.8, 1.2}, repetition penalty {1.0, 1.4}, top-p {0.9, 0.98} and top-k
/// {15, 30}.
pub fn ablation_grid(defaults: &SamplerConfig) -> Vec<AblationPoint> {
    let mut grid = vec![AblationPoint {
        name: "default".into(),
        parameter: None,
        value: None,
        sampler: defaults.clone(),
    }];
    let mut push = |parameter: &str, value: f64, sampler: SamplerConfig| {
        grid.push(AblationPoint {
            name: format!("{parameter}={value}"),
            parameter: Some(parameter.into()),
            value: Some(value),
            sampler,
        })
    };
    for t in [0.8, 1.2] {
        push("temperature", t, SamplerConfig { temperature: t, ..defaults.clone() });
    }
    for p in [1.0, 1.4] {
        push("repetition_penalty", p, SamplerConfig { repetition_penalty: p, ..defaults.clone() });
    }
    for p in [0.9, 0.98] {
        push("top_p", p, SamplerConfig { top_p: p, ..defaults.clone() });
    }
    for k in [15, 30] {
        push("top_k", k as f64, SamplerConfig { top_k: k, ..defaults.clone() });
    }
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub point: AblationPoint,
    pub report: MetricReport,
    pub failures: usize,
}

/// Runs `exp` once per grid point with the same examples and seeds.
pub fn run_sampling_ablation(
    gen: &dyn Generator,
    scores: &[Score],
    exp: &Experiment,
    grid: &[AblationPoint],
    vocab: &Vocabulary,
) -> Result<Vec<AblationRow>, HarnessError> {
    grid.iter()
        .map(|point| {
            let e = Experiment {
                sampler: point.sampler.clone(),
                ..exp.clone()
            };
            let r = run_objective_eval(gen, scores, &e, vocab)?;
            Ok(AblationRow {
                point: point.clone(),
                report: r.report,
                failures: r.failures.len(),
            })
        })
        .collect()
}

/// A seeded train/test split of `n` items.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(n: usize, n_train: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, &[12]));
    let test = idx.split_off(n_train.min(n));
    Split { train: idx, test }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub split: usize,
    pub train: usize,
    pub test: usize,
    /// Held-out loss with the zero state and base weights.
    pub base_loss: f64,
    pub tuned_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSplitConfig {
    pub n_splits: usize,
    pub n_train: usize,
    pub train: TrainConfig,
    /// Prompt budget in tokens.
    pub budget: usize,
    pub seed: u64,
}

/// Held-out examples for `scores`, fixed by `seed`.
pub fn fixed_examples(scores: &[Score], vocab: &Vocabulary, budget: usize, seed: u64) -> Vec<Example> {
    ScoreSource {
        scores,
        vocab,
        budget,
        seed,
        full_sequence_loss: false,
    }
    .epoch(0)
}

/// Finetunes on `n_splits` seeded splits of `corpus` and compares held-out
/// loss against the untuned model. The train mode picks state or LoRA tuning.
pub fn run_style_split_experiment(
    base: &Model<f64>,
    corpus: &[Score],
    vocab: &Vocabulary,
    cfg: &StyleSplitConfig,
) -> Result<Vec<SplitRow>, HarnessError> {
    if cfg.n_train == 0 || cfg.n_train >= corpus.len() {
        return Err(HarnessError::Spec(format!("{} training items of {}", cfg.n_train, corpus.len())));
    }
    (0..cfg.n_splits)
        .map(|s| {
            let sp = split(corpus.len(), cfg.n_train, cfg.seed.wrapping_add(s as u64));
            let train: Vec<Score> = sp.train.iter().map(|&i| corpus[i].clone()).collect();
            let test: Vec<Score> = sp.test.iter().map(|&i| corpus[i].clone()).collect();
            let held_out = fixed_examples(&test, vocab, cfg.budget, cfg.seed ^ 0x5eed);
            let base_loss = evaluate(base, None, &held_out)?;
            let mut source = ScoreSource {
                scores: &train,
                vocab,
                budget: cfg.budget,
                seed: cfg.seed.wrapping_add(1000 + s as u64),
                full_sequence_loss: false,
            };
            let tc = TrainConfig {
                seed: cfg.train.seed.wrapping_add(s as u64),
                ..cfg.train.clone()
            };
            let (tuned_loss, steps) = match tc.mode {
                TuneMode::State { .. } => {
                    let (state, rep) = state_tune(base, &mut source, &tc, &mut |_| {})?;
                    (evaluate(base, Some(&state), &held_out)?, rep.steps)
                }
                TuneMode::Lora { .. } => {
                    let (adapter, rep) = lora_tune(base, None, &mut source, &tc, &mut |_| {})?;
                    let merged = adapter.merge(base).map_err(TrainError::from)?;
                    (evaluate(&merged, None, &held_out)?, rep.steps)
                }
                TuneMode::Pretrain => return Err(HarnessError::Spec("style split needs a finetuning mode".into())),
            };
            Ok(SplitRow {
                split: s,
                train: sp.train.len(),
                test: sp.test.len(),
                base_loss,
                tuned_loss,
                steps,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_tasks() {
        let t = Task::protocol();
        assert_eq!(t.map(|t| (t.n_bars, t.context)), [(2, 8), (4, 16), (8, 32)]);
        assert!(Task { n_bars: 2, context: 4 }.validate().is_err());
    }

    #[test]
    fn ablation_has_default_plus_eight() {
        let g = ablation_grid(&SamplerConfig::default());
        assert_eq!(g.len(), 9);
        for p in &g[1..] {
            let d = SamplerConfig::default();
            let s = &p.sampler;
            let changed = (s.temperature != d.temperature) as u8
                + (s.repetition_penalty != d.repetition_penalty) as u8
                + (s.top_p != d.top_p) as u8
                + (s.top_k != d.top_k) as u8;
            assert_eq!(changed, 1, "{}", p.name);
        }
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let s = split(64, 8, 3);
        assert_eq!((s.train.len(), s.test.len()), (8, 56));
        assert!(s.train.iter().all(|i| !s.test.contains(i)));
        assert_eq!(s, split(64, 8, 3));
        assert_ne!(s, split(64, 8, 4));
    }

    #[test]
    fn parallel_map_keeps_order() {
        assert_eq!(parallel_map(10, 3, |i| i * i), (0..10).map(|i| i * i).collect::<Vec<_>>());
    }
}
