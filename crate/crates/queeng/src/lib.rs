//! Quantum-enhanced graph network for bitemporal hyperspectral change
//! detection: statevector circuit simulation, tape autodiff, superpixel
//! graph features, and the training/evaluation pipeline behind the
//! `queeng` command-line tool.

pub mod autodiff;
pub mod error;
pub mod gfl;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod qec;
pub mod qfl;
pub mod quantum;
pub mod tensor;
pub mod train;

pub mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
