//! A desk-scale laboratory for test-time adaptation on heterogeneous image
//! streams.
//!
//! The centerpiece is an adapter that un-mixes a shifting test stream by
//! clustering high-frequency Fourier amplitude signatures, adapts one model
//! branch per cluster with an entropy + spectral-consistency objective, and
//! periodically merges the branches by size-weighted parameter averaging.
//! Reference adapters (static source model, test-batch normalization with and
//! without un-mixing, entropy minimization) share the same harness so runs
//! are directly comparable and bit-for-bit reproducible.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod clustering;
pub mod container;
pub mod error;
pub mod freda;
pub mod harness;
pub mod model;
pub mod npy;
pub mod rng;
pub mod spectral;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
