//! Attention-guided masking for cross-modal masked language modeling.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: f64 tensors and a reverse-mode tape
//! - [`encoders`]: text, image and cross-modal transformer encoders plus heads
//! - [`agm`]: class-attention aggregation and attention-guided masking
//! - [`tem`]: logit-based text enrichment
//! - [`objectives`]: ITC / ITM / MLM / distillation losses, momentum pair, queues
//! - [`corpus`]: synthetic paired corpus with ground-truth word semantics
//! - [`train`], [`eval`]: training loop, retrieval metrics, ablation harness
//! - [`config`]: the run configuration shared by the CLI

pub mod agm;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod par;
pub mod rng;
pub mod tem;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use par::Exec;
pub use tensor::{Tape, Tensor, Var};
