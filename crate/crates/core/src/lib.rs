//! Image-and-text to text modeling library: a deterministic f64 reference
//! stack covering tensors, tape-based differentiation, a patch-encoder plus
//! encoder–decoder transformer, synthetic task corpora, training, decoding,
//! and evaluation.

pub mod adafactor;
pub mod checkpoint;
pub mod cider;
pub mod corpus;
pub mod dedup;
pub mod error;
pub mod eval;
pub mod fdiff;
pub mod filter;
pub mod model;
pub mod resize;
pub mod scene;
pub mod schedule;
pub mod soup;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{Precision, Tensor};
