//! Sequence-memory engine built from four orthogonal choices: memory
//! architecture, attentional-bias objective, retention gate, and inner-loop
//! learning algorithm. Includes exact reconstructions of the classic
//! recurrent write rules, three assembled model variants, chunk-parallel
//! evaluation with a stale-gradient oracle, and a synthetic-task harness.

pub mod bias;
pub mod chunked;
pub mod error;
pub mod layer;
pub mod memory;
pub mod models;
pub mod optimizer;
pub mod retention;
pub mod tensor;

pub use error::{Error, Result};
