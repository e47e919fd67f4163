pub mod checks;
pub mod config;
pub mod csa;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod network;
pub mod params;
pub mod selftest;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use params::ModelParams;
pub use tensor::{Activation, PoolMode, Real, Tape, Tensor, Var};
