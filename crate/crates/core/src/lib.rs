pub mod channel;
pub mod error;
pub mod kernels;
pub mod moments;
pub mod output;
pub mod quad;
pub mod run;
pub mod scenario;
pub mod specfun;
pub mod transmittance;

pub use error::{Error, Result};
