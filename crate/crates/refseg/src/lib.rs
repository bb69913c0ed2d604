//! Referring-expression comprehension + generation on a synthetic shapes
//! benchmark: a bi-LSTM sentence encoder, sentence-generated spatial dynamic
//! filters over a small CNN feature map, a grid detection/mask head, and an
//! attention caption decoder trained for caption consistency.

pub mod error;
pub mod eval;
pub mod ablate;
pub mod caption;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dynfilter;
pub mod gradcheck;
pub mod head;
pub mod imgio;
pub mod lang;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod train;
pub mod vision;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
