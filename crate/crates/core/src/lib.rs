//! Core algorithms for representation-conditioned one-step face restoration.
//!
//! This crate is `no_std` (with `alloc`): it holds the math only. Image and
//! checkpoint IO, configuration files and the command-line front end live in
//! the `hdrface` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod ablation;
pub mod autodiff;
pub mod degrade;
pub mod encoder;
pub mod onestep;
pub mod sdfm;
pub mod synth;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{ImageGrid, LatentGrid};
pub use tensor::Tensor;
