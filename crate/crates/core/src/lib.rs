pub mod autograd;
pub mod error;
pub mod fft;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use model::{Network, NetworkConfig};
pub use params::ParameterStore;
pub use scalar::Real;
pub use tensor::{FeatureMap, Tensor};
