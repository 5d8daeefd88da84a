//! Symbolic music infilling workbench.
//!
//! The crate is organised along the processing pipeline:
//!
//! * [`midi`] reads and writes Standard MIDI Files into a [`midi::Score`].
//! * [`tokenizer`] turns scores into REMI token streams and compresses them
//!   with byte-pair encoding.
//! * [`prompt`] computes per-bar attribute controls and lays out Bar-Fill
//!   infilling prompts.
//! * [`model`] is an RWKV-7 recurrent language model with exact reverse-mode
//!   gradients for its parameters and its initial state.
//! * [`training`] holds the optimisation loops: pretraining, initial-state
//!   tuning and LoRA finetuning.
//! * [`sampler`] decodes infills with attribute-control injection.
//! * [`metrics`] scores infills against the original content.
//! * [`harness`] wires everything into reproducible experiments.

pub mod harness;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod prompt;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tokenizer;
pub mod training;
