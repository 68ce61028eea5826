//! Group convolutions with learned filter bases.

pub mod basis;
pub mod data;
pub mod equivariance;
mod error;
pub mod group;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
