pub mod autodiff;
pub mod cbam;
pub mod cli;
pub mod dataio;
pub mod evaluation;
pub mod explain;
pub mod error;
pub mod network;
pub mod perturb;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
