use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mrwkv::service;
use mrwkv::store::{read_midi_dir, Store, CHECKPOINT_ENV};
use mrwkv_core::harness::{
    ablation_grid, resolve_spec, run_objective_eval, run_sampling_ablation, run_style_split_experiment, Experiment,
    RegionRequest, StyleSplitConfig, Task, Variant,
};
use mrwkv_core::midi::{read_midi, write_midi, Score};
use mrwkv_core::model::{Model, ModelConfig};
use mrwkv_core::prompt::CorpusFilter;
use mrwkv_core::sampler::SamplerConfig;
use mrwkv_core::synth::{style_score, Style};
use mrwkv_core::tokenizer::{encode_base, quantize_score, train_bpe, write_sequence, BaseVocab, TokenConfig, Vocabulary};
use mrwkv_core::training::{lora_tune, pretrain, state_tune, ScoreSource, StepLog, TrainConfig, TuneMode};

type Error = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(name = "mrwkv", version, about = "Symbolic music infilling with an RWKV-7 model")]
struct Cli {
    /// Checkpoint directory holding vocab.json, model.ckpt and the optional
    /// state.ckpt / lora.ckpt.
    #[arg(long, global = true, env = CHECKPOINT_ENV, default_value = "checkpoints")]
    checkpoint_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a BPE vocabulary on a MIDI folder.
    Tokenizer {
        #[arg(long)]
        midi_dir: PathBuf,
        #[arg(long, default_value_t = 16000)]
        vocab_size: usize,
    },
    /// Build or encode corpora.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Pretrain a model from scratch.
    Train(TrainArgs),
    /// State or LoRA finetuning of the stored model.
    Finetune(FinetuneArgs),
    /// Infill a bar range of a MIDI file.
    Infill(InfillArgs),
    /// Objective evaluation over a MIDI folder.
    Eval(EvalArgs),
    /// Sampling-parameter ablation.
    Ablate(EvalArgs),
    /// Finetune on seeded train/test splits and compare held-out loss.
    Split(SplitArgs),
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, value_enum, default_value_t = VariantArg::Base)]
        variant: VariantArg,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Write a synthetic single-style corpus as MIDI files.
    Synth {
        #[arg(long, value_enum)]
        style: StyleArg,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        bars: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Encode a MIDI folder into BPE token sequences, one record per track.
    Encode {
        #[arg(long)]
        midi_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Lyrical,
    Driving,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum VariantArg {
    Base,
    State,
    Lora,
    StateLora,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    State,
    Lora,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    midi_dir: PathBuf,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 384)]
    d_model: usize,
    #[arg(long, default_value_t = 64)]
    head_size: usize,
    #[arg(long, default_value_t = 1344)]
    d_ffn: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 24)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 2048)]
    seq_len: usize,
    /// Stop after this many seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// JSONL step log; stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(clap::Args)]
struct FinetuneArgs {
    #[arg(long)]
    midi_dir: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    /// Defaults to the rank.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 16)]
    epochs: usize,
    #[arg(long, default_value_t = 2048)]
    seq_len: usize,
    #[arg(long)]
    time_budget: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1.2)]
    repetition_penalty: f64,
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 2048)]
    max_tokens: usize,
}

impl SamplerArgs {
    fn config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            repetition_penalty: self.repetition_penalty,
            top_k: self.top_k,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            seed,
            ..SamplerConfig::default()
        }
    }
}

#[derive(clap::Args)]
struct InfillArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    track: usize,
    #[arg(long)]
    start_bar: usize,
    #[arg(long)]
    bars: usize,
    /// Context bars on each side; defaults to 4 * bars.
    #[arg(long)]
    context: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = VariantArg::Base)]
    variant: VariantArg,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    midi_dir: PathBuf,
    /// Bars per task; context is always 4 * bars.
    #[arg(long, default_value_t = 2)]
    bars: usize,
    /// Test scores to use; 0 for all.
    #[arg(long, default_value_t = 100)]
    examples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Base)]
    variant: VariantArg,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SplitArgs {
    #[arg(long)]
    midi_dir: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, default_value_t = 3)]
    splits: usize,
    #[arg(long, default_value_t = 99)]
    train: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 16)]
    epochs: usize,
    #[arg(long, default_value_t = 2048)]
    seq_len: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn variant(v: VariantArg, store: &Store) -> Result<Variant, Error> {
    let rank = || -> Result<usize, Error> { Ok(store.load_lora()?.rank) };
    Ok(match v {
        VariantArg::Base => Variant::Base,
        VariantArg::State => Variant::State,
        VariantArg::Lora => Variant::Lora { rank: rank()? },
        VariantArg::StateLora => Variant::StateLora { rank: rank()? },
    })
}

fn scores(dir: &Path) -> Result<Vec<Score>, Error> {
    let all = read_midi_dir(dir)?;
    if all.is_empty() {
        return Err(format!("no readable MIDI files in {}", dir.display()).into());
    }
    Ok(all.into_iter().map(|(_, s)| s).collect())
}

fn admitted(scores: Vec<Score>) -> Vec<Score> {
    let filter = CorpusFilter::default();
    let n = scores.len();
    let kept: Vec<Score> = scores.into_iter().filter(|s| filter.check(s).is_ok()).collect();
    if kept.len() < n {
        eprintln!("{} of {n} scores below {} bars or {} notes dropped", n - kept.len(), filter.min_bars, filter.min_notes);
    }
    kept
}

fn emit(out: Option<&Path>, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn logger(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

fn log_line(w: &mut dyn Write, s: &StepLog) {
    if let Ok(line) = serde_json::to_string(s) {
        let _ = writeln!(w, "{line}");
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let store = Store::new(&cli.checkpoint_dir);
    match cli.command {
        Command::Tokenizer { midi_dir, vocab_size } => {
            let base = BaseVocab::new(TokenConfig::default());
            let mut corpus = Vec::new();
            for s in admitted(scores(&midi_dir)?) {
                let q = quantize_score(&s, &base)?;
                corpus.extend(encode_base(&q, &base)?.0);
            }
            let (vocab, report) = train_bpe(&corpus, base, vocab_size)?;
            store.save_vocab(&vocab)?;
            eprintln!(
                "vocabulary of {} tokens{} written to {}",
                report.size,
                if report.exhausted { " (merges exhausted)" } else { "" },
                store.vocab_path().display()
            );
        }
        Command::Dataset { action } => match action {
            DatasetAction::Synth {
                style,
                count,
                bars,
                seed,
                out_dir,
            } => {
                let style = match style {
                    StyleArg::Lyrical => Style::Lyrical,
                    StyleArg::Driving => Style::Driving,
                };
                fs::create_dir_all(&out_dir)?;
                for i in 0..count {
                    let s = style_score(style, bars, seed.wrapping_add(i as u64));
                    fs::write(out_dir.join(format!("{style:?}_{i:04}.mid").to_lowercase()), write_midi(&s)?)?;
                }
                eprintln!("{count} files written to {}", out_dir.display());
            }
            DatasetAction::Encode { midi_dir, out } => {
                let vocab = store.load_vocab()?;
                let mut f = std::io::BufWriter::new(fs::File::create(&out)?);
                let mut n = 0;
                for s in scores(&midi_dir)? {
                    let q = quantize_score(&s, vocab.base())?;
                    for t in encode_base(&q, vocab.base())?.0 {
                        write_sequence(&mut f, &vocab.apply(&t)?, vocab.hash())?;
                        n += 1;
                    }
                }
                eprintln!("{n} sequences written to {}", out.display());
            }
        },
        Command::Train(a) => {
            let vocab = store.load_vocab()?;
            let corpus = admitted(scores(&a.midi_dir)?);
            let cfg = ModelConfig {
                n_layers: a.layers,
                d_model: a.d_model,
                head_size: a.head_size,
                d_ffn: a.d_ffn,
                vocab_size: vocab.len(),
            };
            let mut model = Model::init(cfg, a.seed)?;
            let tc = TrainConfig {
                lr: a.lr,
                epochs: a.epochs,
                batch_size: a.batch_size,
                seq_len: a.seq_len,
                seed: a.seed,
                time_budget: a.time_budget,
                ..TrainConfig::pretrain()
            };
            let mut source = ScoreSource {
                scores: &corpus,
                vocab: &vocab,
                budget: a.seq_len,
                seed: a.seed,
                full_sequence_loss: false,
            };
            let mut w = logger(a.log.as_deref())?;
            let report = pretrain(&mut model, &mut source, &tc, &mut |s| log_line(&mut *w, s))?;
            store.save_model(&model)?;
            eprintln!("{}", serde_json::to_string(&report)?);
        }
        Command::Finetune(a) => {
            let vocab = store.load_vocab()?;
            let model = store.load_model()?;
            let corpus = admitted(scores(&a.midi_dir)?);
            let mut tc = match a.mode {
                ModeArg::State => TrainConfig::state(),
                ModeArg::Lora => TrainConfig::lora(a.rank),
            };
            if let (ModeArg::Lora, Some(alpha)) = (a.mode, a.alpha) {
                tc.mode = TuneMode::Lora { rank: a.rank, alpha };
            }
            tc.lr = a.lr.unwrap_or(tc.lr);
            tc.epochs = a.epochs;
            tc.seq_len = a.seq_len;
            tc.time_budget = a.time_budget;
            tc.seed = a.seed;
            let mut source = ScoreSource {
                scores: &corpus,
                vocab: &vocab,
                budget: a.seq_len,
                seed: a.seed,
                full_sequence_loss: false,
            };
            let mut w = logger(a.log.as_deref())?;
            let mut log = |s: &StepLog| log_line(&mut *w, s);
            let report = match a.mode {
                ModeArg::State => {
                    let (state, r) = state_tune(&model, &mut source, &tc, &mut log)?;
                    store.save_state(&state)?;
                    r
                }
                ModeArg::Lora => {
                    let (adapter, r) = lora_tune(&model, None, &mut source, &tc, &mut log)?;
                    store.save_lora(&adapter, &model)?;
                    r
                }
            };
            eprintln!("{}", serde_json::to_string(&report)?);
        }
        Command::Infill(a) => {
            let engine = store.load_engine(variant(a.variant, &store)?)?;
            let score = read_midi(&fs::read(&a.input)?)?;
            let q = quantize_score(&score, engine.vocab.base())?;
            let req = RegionRequest {
                track: a.track,
                start_bar: a.start_bar,
                n_bars: a.bars,
                context: a.context.unwrap_or(4 * a.bars),
                controls: Vec::new(),
                track_order: None,
            };
            let spec = resolve_spec(&q, &req, &engine.vocab)?;
            let out = engine.infill_spec(&score, &spec, &a.sampler.config(a.seed))?;
            fs::write(&a.out, write_midi(&out.score)?)?;
            eprintln!("wrote {}", a.out.display());
        }
        Command::Eval(a) => {
            let engine = store.load_engine(variant(a.variant, &store)?)?;
            let exp = experiment(&a, engine.variant);
            let report = run_objective_eval(&engine, &scores(&a.midi_dir)?, &exp, &engine.vocab)?;
            emit(a.out.as_deref(), &report)?;
        }
        Command::Ablate(a) => {
            let engine = store.load_engine(variant(a.variant, &store)?)?;
            let exp = experiment(&a, engine.variant);
            let grid = ablation_grid(&exp.sampler);
            let table = run_sampling_ablation(&engine, &scores(&a.midi_dir)?, &exp, &grid, &engine.vocab)?;
            emit(a.out.as_deref(), &table)?;
        }
        Command::Split(a) => {
            let vocab: Vocabulary = store.load_vocab()?;
            let model = store.load_model()?;
            let corpus = admitted(scores(&a.midi_dir)?);
            let mut train = match a.mode {
                ModeArg::State => TrainConfig::state(),
                ModeArg::Lora => TrainConfig::lora(a.rank),
            };
            train.epochs = a.epochs;
            train.seq_len = a.seq_len;
            let cfg = StyleSplitConfig {
                n_splits: a.splits,
                n_train: a.train,
                train,
                budget: a.seq_len,
                seed: a.seed,
            };
            emit(a.out.as_deref(), &run_style_split_experiment(&model, &corpus, &vocab, &cfg)?)?;
        }
        Command::Serve { addr, variant: v } => {
            let rt = tokio::runtime::Runtime::new()?;
            let store2 = store.clone();
            rt.block_on(service::serve(&addr, move || {
                let var = variant(v, &store2).map_err(|e| e.to_string())?;
                store2.load_engine(var).map_err(|e| e.to_string())
            }))?;
        }
    }
    Ok(())
}

fn experiment(a: &EvalArgs, variant: Variant) -> Experiment {
    Experiment {
        n_examples: a.examples,
        seed: a.seed,
        workers: a.workers,
        sampler: a.sampler.config(a.seed),
        ..Experiment::new(Task::new(a.bars), variant)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
