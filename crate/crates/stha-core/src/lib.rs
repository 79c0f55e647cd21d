//! Configurable spatial-temporal hierarchy of memory-augmented autoencoders
//! for unsupervised video anomaly detection.
//!
//! The crate is `no_std` with `alloc`; the default `std` feature only enables
//! runtime CPU dispatch in the matrix kernels and `std` error impls.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod block;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod hierarchy;
mod kernels;
pub mod loss;
pub mod memory;
pub mod optim;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
