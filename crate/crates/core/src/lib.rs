//! Direct and iterative amortized policy optimization inside an
//! entropy-regularized actor-critic, with diagnostics on analytic toy
//! environments.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod distributions;
pub mod envs;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model_based;
pub mod networks;
pub mod objective;
pub mod optimizers;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
