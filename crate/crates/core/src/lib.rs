//! Replica-symmetric free energy, approximate message passing and the
//! conditional first-moment machinery for the binary perceptron with a
//! general activation `U`.

pub mod activation;
pub mod amp;
pub mod error;
pub mod gauss;
pub mod moments;
pub mod rs;
pub mod sevol;

pub use error::{Error, Result};
