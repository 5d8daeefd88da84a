//! Constrained autoregressive decoding of infills.
//!
//! Logit processing follows a fixed order: repetition penalty over the
//! tokens generated so far, the forbidden mask, temperature, top-k, then
//! top-p. Generation counts bars on the unmerged `Bar_None` id, injects the
//! next bar's attribute controls after each separator, never lets two
//! separators touch, and ends after exactly `N` bars.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError, State};
use crate::prompt::AttributeControls;
use crate::rng::seeded;
use crate::tokenizer::{BaseToken, TokenConfig, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("logits contain a non-finite value")]
    NonFinite,
    #[error("every token was filtered out")]
    NoMass,
    #[error("reached max_tokens after {bars_completed} complete bars")]
    Truncated { partial: Vec<u32>, bars_completed: usize },
    #[error("bad infill request: {0}")]
    Request(String),
    #[error("model: {0}")]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub repetition_penalty: f64,
    /// 0 disables top-k.
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
    pub max_tokens: usize,
    /// Argmax instead of sampling.
    pub greedy: bool,
    /// Forbid tokens that would make the fill block ungrammatical.
    pub grammar: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            repetition_penalty: 1.2,
            top_k: 20,
            top_p: 0.95,
            seed: 0,
            max_tokens: 2048,
            greedy: false,
            grammar: true,
        }
    }
}

impl SamplerConfig {
    /// No penalty, unit temperature, no truncation: plain softmax sampling.
    pub fn identity() -> Self {
        Self {
            repetition_penalty: 1.0,
            top_k: 0,
            top_p: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: &str| Err(SampleError::Config(m.to_string()));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return bad("repetition_penalty must be at least 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }
}

/// Turns logits into a sampling distribution. `history` holds the tokens
/// the penalty applies to (each distinct id is penalized once); `forbidden`
/// may be empty or one flag per token.
pub fn filter_logits<F: Copy + Into<f64>>(
    logits: &[F],
    history: &[u32],
    cfg: &SamplerConfig,
    forbidden: &[bool],
) -> Result<Vec<f64>, SampleError> {
    let mut l: Vec<f64> = logits.iter().map(|&v| v.into()).collect();
    if l.iter().any(|v| !v.is_finite()) {
        return Err(SampleError::NonFinite);
    }
    if cfg.repetition_penalty != 1.0 {
        let mut seen = vec![false; l.len()];
        for &id in history {
            let i = id as usize;
            if i < l.len() && !seen[i] {
                seen[i] = true;
                l[i] = if l[i] > 0.0 { l[i] / cfg.repetition_penalty } else { l[i] * cfg.repetition_penalty };
            }
        }
    }
    for (v, &f) in l.iter_mut().zip(forbidden) {
        if f {
            *v = f64::NEG_INFINITY;
        }
    }
    if cfg.temperature != 1.0 {
        l.iter_mut().for_each(|v| *v /= cfg.temperature);
    }
    let alive = l.iter().filter(|v| v.is_finite()).count();
    if alive == 0 {
        return Err(SampleError::NoMass);
    }
    if cfg.top_k > 0 && cfg.top_k < alive {
        let mut order: Vec<usize> = (0..l.len()).filter(|&i| l[i].is_finite()).collect();
        order.sort_by(|&a, &b| l[b].total_cmp(&l[a]).then(a.cmp(&b)));
        for &i in &order[cfg.top_k..] {
            l[i] = f64::NEG_INFINITY;
        }
    }
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = l.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    if cfg.top_p < 1.0 {
        let mut order: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        let mut acc = 0.0;
        let mut keep = order.len();
        for (n, &i) in order.iter().enumerate() {
            acc += p[i];
            if acc >= cfg.top_p {
                keep = n + 1;
                break;
            }
        }
        for &i in &order[keep..] {
            p[i] = 0.0;
        }
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(p)
}

/// Inverse-CDF draw for `u` in `[0, 1)`; never returns a zero-mass index.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Expect {
    BarHead,
    AfterPosition,
    Velocity,
    Duration,
    AfterNote,
}

/// Bar grammar state inside the fill block, tracked on base tokens.
#[derive(Clone, Debug)]
struct Grammar {
    expect: Expect,
    last_pos: Option<u16>,
    bar_units: u16,
    has_note: bool,
    ppq: u16,
}

impl Grammar {
    fn new(timesig: (u8, u8), cfg: &TokenConfig) -> Self {
        let mut g = Self {
            expect: Expect::BarHead,
            last_pos: None,
            bar_units: 0,
            has_note: false,
            ppq: cfg.positions_per_quarter,
        };
        g.set_timesig(timesig);
        g
    }

    fn set_timesig(&mut self, (n, d): (u8, u8)) {
        self.bar_units = (self.ppq as u32 * 4 * n as u32 / d.max(1) as u32) as u16;
    }

    fn open_bar(&mut self) {
        self.expect = Expect::BarHead;
        self.last_pos = None;
        self.has_note = false;
    }

    fn can_close(&self) -> bool {
        self.has_note && !matches!(self.expect, Expect::Velocity | Expect::Duration)
    }

    /// Advances over one content token; false when it is not allowed here.
    fn accept(&mut self, tok: BaseToken) -> bool {
        match tok {
            BaseToken::TimeSig(n, d) if self.expect == Expect::BarHead && self.last_pos.is_none() => {
                self.set_timesig((n, d));
                true
            }
            BaseToken::Position(p) => {
                let ok = !matches!(self.expect, Expect::Velocity | Expect::Duration)
                    && self.last_pos.is_none_or(|lp| p > lp)
                    && p < self.bar_units;
                if ok {
                    self.last_pos = Some(p);
                    self.expect = Expect::AfterPosition;
                }
                ok
            }
            BaseToken::Tempo(_) => self.expect == Expect::AfterPosition,
            BaseToken::Pitch(_) if matches!(self.expect, Expect::AfterPosition | Expect::AfterNote) => {
                self.expect = Expect::Velocity;
                true
            }
            BaseToken::Velocity(_) if self.expect == Expect::Velocity => {
                self.expect = Expect::Duration;
                true
            }
            BaseToken::Duration(_) if self.expect == Expect::Duration => {
                self.expect = Expect::AfterNote;
                self.has_note = true;
                true
            }
            _ => false,
        }
    }
}

/// What to generate after a prompt that ends with `FillBar_Start` and the
/// first bar's controls.
#[derive(Clone, Debug, PartialEq)]
pub struct InfillRequest<'a> {
    pub prompt: &'a [u32],
    pub n_bars: usize,
    /// One entry per infilled bar; entry 0 is already in the prompt.
    pub controls: &'a [AttributeControls],
    /// Meter at the start of the region, for position bounds.
    pub timesig: (u8, u8),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfillOutput {
    /// Tokens produced after the prompt: sampled content, separators,
    /// injected controls and the closing `FillBar_End`.
    pub generated: Vec<u32>,
    /// The whole fill block after `FillBar_Start` (first controls included).
    pub fill: Vec<u32>,
    pub bars: usize,
    /// Early `FillBar_End` draws that were resampled.
    pub early_stops: usize,
}

/// Samples an `N`-bar infill.
pub fn infill(
    model: &Model<f32>,
    state0: Option<&State<f32>>,
    vocab: &Vocabulary,
    req: &InfillRequest,
    cfg: &SamplerConfig,
) -> Result<InfillOutput, SampleError> {
    cfg.validate()?;
    if req.n_bars == 0 || req.controls.len() != req.n_bars {
        return Err(SampleError::Request(format!(
            "{} bars requested with {} control groups",
            req.n_bars,
            req.controls.len()
        )));
    }
    let start_id = vocab.must(BaseToken::FillBarStart);
    let fill_at = req
        .prompt
        .iter()
        .rposition(|&i| i == start_id)
        .ok_or_else(|| SampleError::Request("prompt has no FillBar_Start".into()))?;
    let bar_id = vocab.must(BaseToken::BarNone);
    let end_id = vocab.must(BaseToken::FillBarEnd);
    let vsize = model.cfg.vocab_size;
    if vocab.len() > vsize {
        return Err(SampleError::Request(format!("vocabulary of {} tokens exceeds the model's {vsize}", vocab.len())));
    }

    // Expansions of every sampleable id into base tokens; None marks ids
    // that may never be sampled as content.
    let expansions: Vec<Option<Vec<BaseToken>>> = (0..vsize as u32)
        .map(|id| {
            if id as usize >= vocab.len() || id == bar_id || id == end_id {
                return None;
            }
            let base = vocab.expand(id).ok()?;
            let toks: Option<Vec<BaseToken>> = base.iter().map(|&b| vocab.base().token(b)).collect();
            toks.filter(|t| t.iter().all(|x| x.is_mergeable()))
        })
        .collect();

    let mut state = state0.cloned().unwrap_or_else(|| State::zeros(&model.cfg));
    let (last, head) = req
        .prompt
        .split_last()
        .ok_or_else(|| SampleError::Request("empty prompt".into()))?;
    model.absorb(head, &mut state)?;
    let mut logits = model.forward_step(*last, &mut state)?;

    let mut rng = seeded(cfg.seed);
    let mut grammar = Grammar::new(req.timesig, vocab.base().config());
    let mut generated: Vec<u32> = Vec::new();
    let mut history: Vec<u32> = Vec::new();
    let mut bars_done = 0usize;
    let mut early_stops = 0usize;
    let mut content_in_bar = false;

    loop {
        if generated.len() >= cfg.max_tokens {
            return Err(SampleError::Truncated {
                partial: generated,
                bars_completed: bars_done,
            });
        }
        let last_bar = bars_done + 1 == req.n_bars;
        let can_close = if cfg.grammar { grammar.can_close() } else { content_in_bar };
        let mut forbidden: Vec<bool> = (0..vsize)
            .map(|id| match &expansions[id] {
                None => true,
                Some(toks) if cfg.grammar => {
                    let mut g = grammar.clone();
                    !toks.iter().all(|&t| g.accept(t))
                }
                Some(_) => false,
            })
            .collect();
        forbidden[bar_id as usize] = !can_close;
        forbidden[end_id as usize] = !can_close;

        let mut pick = draw(&logits, &history, cfg, &forbidden, &mut rng)?;
        if pick == end_id && !last_bar {
            while pick == end_id && early_stops < 8 {
                early_stops += 1;
                pick = draw(&logits, &history, cfg, &forbidden, &mut rng)?;
            }
            if pick == end_id {
                forbidden[end_id as usize] = true;
                pick = draw(&logits, &history, cfg, &forbidden, &mut rng)?;
            }
        }

        if pick == bar_id || pick == end_id {
            bars_done += 1;
            if bars_done == req.n_bars {
                generated.push(end_id);
                break;
            }
            generated.push(bar_id);
            logits = model.forward_step(bar_id, &mut state)?;
            let controls = &req.controls[bars_done];
            for tok in controls.tokens() {
                let id = vocab.must(tok);
                if generated.len() >= cfg.max_tokens {
                    return Err(SampleError::Truncated {
                        partial: generated,
                        bars_completed: bars_done,
                    });
                }
                generated.push(id);
                logits = model.forward_step(id, &mut state)?;
            }
            grammar.open_bar();
            content_in_bar = false;
            continue;
        }

        if let Some(toks) = &expansions[pick as usize] {
            for &t in toks {
                grammar.accept(t);
            }
        }
        content_in_bar = true;
        generated.push(pick);
        history.push(pick);
        logits = model.forward_step(pick, &mut state)?;
    }

    let mut fill = req.prompt[fill_at + 1..].to_vec();
    fill.extend_from_slice(&generated);
    Ok(InfillOutput {
        generated,
        fill,
        bars: bars_done,
        early_stops,
    })
}

fn draw(
    logits: &[f32],
    history: &[u32],
    cfg: &SamplerConfig,
    forbidden: &[bool],
    rng: &mut crate::rng::Rng,
) -> Result<u32, SampleError> {
    let p = filter_logits(logits, history, cfg, forbidden)?;
    let i = if cfg.greedy { argmax(&p) } else { sample_index(&p, rng.gen::<f64>()) };
    Ok(i as u32)
}
