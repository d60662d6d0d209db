//! Few-shot classification benchmark toolkit.
//!
//! Building blocks for comparing four training strategies over long-tail
//! datasets — episodic learning from scratch (FEL), episodic transfer
//! learning (FETL), conventional fine-tuning (DTL), and a frozen pretrained
//! baseline (DL) — all scored by the same deterministic N-way K-shot
//! episodic evaluation harness.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod eval;
pub mod protonet;
pub mod regimes;
pub mod report;
pub mod rng;
pub mod table;
pub mod tensor;

pub use error::{Error, Result};
