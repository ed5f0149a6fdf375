pub mod error;
pub mod flow;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod pipeline;
pub mod propagation;
pub mod surrogate;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Kind, LabelMap, Real, Tensor, IGNORE_LABEL};
