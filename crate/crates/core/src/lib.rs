//! Transductive multi-head few-shot learning.
//!
//! A shared embedding network is meta-trained in a source domain with three
//! heads (a meta-confidence prototype classifier, a dense pixel classifier
//! over global prototypes and a semantic linear classifier). On a target
//! task it is fine-tuned through the semantic head on the support set, and
//! query labels are predicted with iterative transductive prototypes,
//! optionally averaged over augmented copies of the episode.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod heads;
pub mod image;
pub mod numeric;
pub mod pipeline;
pub mod seed;
pub mod transduction;

pub use error::{Error, Result};
pub use numeric::{LrSchedule, Tape, Tensor, Var};
