//! Entity/relation-centric reading comprehension at desk scale.
//!
//! * [`tensor`]: f64 tensors, a reverse-mode tape with selective retention, optimizers.
//! * [`encoder`]: Transformer encoder over `[question; SEP; paragraph]`.
//! * [`reader`]: explicit-reference candidate scoring and its ablations.
//! * [`trainer`]: two-forward-pass training with constant retained memory in
//!   the paragraph count, plus the full-retention baseline.
//! * [`relation`]: residual CNN relation scorer and distant-supervision labelling.
//! * [`chart`]: PSPP graph completion and greedy chart extraction.
//! * [`metrics`]: accuracy, token F1 and pair-level precision/recall curves.
//! * [`vocab`]: token ids with reserved `[PAD]`, `[UNK]`, `[SEP]`.
//! * [`harness`]: configuration, file formats, synthetic data and commands.

pub mod chart;
pub mod encoder;
mod error;
pub mod harness;
pub mod metrics;
pub mod reader;
pub mod relation;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Retention, Tensor, Var};
