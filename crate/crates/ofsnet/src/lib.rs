//! A micro deep-learning library built around a convolution layer that
//! learns its own filter size.
//!
//! The filter size is a continuous parameter: an activation for size `k`
//! interpolates the activations of the two odd-integer-sized filters
//! bracketing `k`, and a single convolution with a composite filter
//! reproduces that interpolation exactly. The size trains by gradient
//! descent alongside the weights; crossing an integer boundary expands or
//! shrinks the stored filter bank in place.
//!
//! The crate also carries everything needed to run the experiments end to
//! end: plain fixed-size layers ([`ops`]), a training harness with metrics
//! and an exhaustive fixed-size sweep ([`network`]), finite-difference
//! gradient verification ([`gradcheck`]), synthetic planted-scale data plus
//! IDX and tensor file IO ([`data`]), and deterministic seeded randomness
//! ([`rng`]).

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod ofs;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FilterBank, Tensor};
