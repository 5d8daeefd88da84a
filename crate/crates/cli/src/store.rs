//! On-disk layout of a checkpoint directory.
//!
//! ```text
//! <dir>/vocab.json   tokenizer
//! <dir>/model.ckpt   base parameters
//! <dir>/state.ckpt   tuned initial state (optional)
//! <dir>/lora.ckpt    LoRA adapter (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use mrwkv_core::harness::{Engine, Variant};
use mrwkv_core::midi::{read_midi, MidiError, Score};
use mrwkv_core::model::{read_tensor_file, write_tensor_file, CheckpointError, LoraAdapter, Model, ModelError, State};
use mrwkv_core::tokenizer::{TokenizerError, Vocabulary};
use thiserror::Error;

/// Environment variable naming the checkpoint directory.
pub const CHECKPOINT_ENV: &str = "MRWKV_CHECKPOINT_DIR";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Midi { path: PathBuf, source: MidiError },
    #[error("{0}")]
    Mismatch(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug)]
pub struct Store {
    pub dir: PathBuf,
}

impl Store {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.dir.join("vocab.json")
    }

    pub fn model_path(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn state_path(&self) -> PathBuf {
        self.dir.join("state.ckpt")
    }

    pub fn lora_path(&self) -> PathBuf {
        self.dir.join("lora.ckpt")
    }

    fn ensure_dir(&self) -> Result<(), StoreError> {
        fs::create_dir_all(&self.dir).map_err(io(&self.dir))
    }

    pub fn save_vocab(&self, vocab: &Vocabulary) -> Result<(), StoreError> {
        self.ensure_dir()?;
        let p = self.vocab_path();
        fs::write(&p, vocab.to_json()).map_err(io(&p))
    }

    pub fn load_vocab(&self) -> Result<Vocabulary, StoreError> {
        let p = self.vocab_path();
        let text = fs::read_to_string(&p).map_err(io(&p))?;
        Ok(Vocabulary::from_json(&text)?)
    }

    pub fn save_model(&self, model: &Model<f64>) -> Result<(), StoreError> {
        self.ensure_dir()?;
        Ok(write_tensor_file(&self.model_path(), &model.to_tensor_file())?)
    }

    pub fn load_model(&self) -> Result<Model<f64>, StoreError> {
        Ok(Model::from_tensor_file(&read_tensor_file(&self.model_path())?)?)
    }

    pub fn save_state(&self, state: &State<f64>) -> Result<(), StoreError> {
        self.ensure_dir()?;
        Ok(write_tensor_file(&self.state_path(), &state.to_tensor_file())?)
    }

    pub fn load_state(&self) -> Result<State<f64>, StoreError> {
        Ok(State::from_tensor_file(&read_tensor_file(&self.state_path())?)?)
    }

    pub fn save_lora(&self, adapter: &LoraAdapter<f64>, model: &Model<f64>) -> Result<(), StoreError> {
        self.ensure_dir()?;
        Ok(write_tensor_file(&self.lora_path(), &adapter.to_tensor_file(&model.cfg))?)
    }

    pub fn load_lora(&self) -> Result<LoraAdapter<f64>, StoreError> {
        Ok(LoraAdapter::from_tensor_file(&read_tensor_file(&self.lora_path())?)?.1)
    }

    /// Loads the base model plus whatever `variant` asks for and converts it
    /// to the inference precision.
    pub fn load_engine(&self, variant: Variant) -> Result<Engine, StoreError> {
        let vocab = self.load_vocab()?;
        let base = self.load_model()?;
        if vocab.len() > base.cfg.vocab_size {
            return Err(StoreError::Mismatch(format!(
                "vocabulary of {} tokens does not fit a model with {} outputs",
                vocab.len(),
                base.cfg.vocab_size
            )));
        }
        let (model, state) = match variant {
            Variant::Base => (base, None),
            Variant::State => (base, Some(self.load_state()?)),
            Variant::Lora { .. } => (self.load_lora()?.merge(&base)?, None),
            Variant::StateLora { .. } => (self.load_lora()?.merge(&base)?, Some(self.load_state()?)),
        };
        if let Some(s) = &state {
            if s.cfg != model.cfg {
                return Err(StoreError::Mismatch("state and model configs differ".into()));
            }
        }
        Ok(Engine {
            model: model.cast(),
            state: state.map(|s| s.cast()),
            vocab,
            variant,
        })
    }
}

/// Every `.mid`/`.midi` file under `dir`, sorted by path. Unreadable files
/// are reported to stderr and skipped.
pub fn read_midi_dir(dir: &Path) -> Result<Vec<(PathBuf, Score)>, StoreError> {
    let mut paths = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io(&d))? {
            let p = entry.map_err(io(&d))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
            {
                paths.push(p);
            }
        }
    }
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let bytes = fs::read(&p).map_err(io(&p))?;
        match read_midi(&bytes) {
            Ok(s) => out.push((p, s)),
            Err(e) => eprintln!("skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}
