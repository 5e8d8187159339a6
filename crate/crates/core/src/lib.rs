//! Electrode-wise EEG sequence modeling at desk scale.
//!
//! The crate is organized around a two-stage training recipe:
//!
//! 1. **Pretraining** — multi-electrode recordings are split electrode by
//!    electrode ([`tokenizer`]), each stream is prefixed with a learnable
//!    electrode condition token, and a causal-attention temporal encoder
//!    ([`ete`]) is trained to predict the next signal token.
//! 2. **Fine-tuning** — the frozen encoder summarizes each electrode stream
//!    through an appended special token; the summaries activate a subgraph of
//!    a 138-node electrode graph ([`teg`]) whose masked attention layers and
//!    per-task heads train jointly across tasks.
//!
//! Everything runs on [`numkit`], a small f64 tensor kernel with taped
//! reverse-mode differentiation and a finite-difference gradient oracle, so
//! every gradient in the stack is checkable against central differences.
//! [`dataio`] provides the dataset container, preprocessing, and seeded
//! synthetic corpora; [`train`] has the optimization loops and experiment
//! harnesses behind the CLI.

pub mod checkpoint;
pub mod dataio;
pub mod ete;
pub mod numkit;
pub mod teg;
pub mod tokenizer;
pub mod train;
pub mod verify;
