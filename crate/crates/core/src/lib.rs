pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod ften;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Param, ParamId, ParamSet};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DefaultReal, Init, Shape, Tensor};
