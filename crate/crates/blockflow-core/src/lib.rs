//! Core library for conditional generation of single-cell expression profiles.
//!
//! The pipeline groups genes into balanced blocks by iterative optimal
//! transport over semantic gene embeddings, compresses block tensors with a
//! conditional attention VAE, and models the latent distribution with
//! conditional flow matching. Everything is built on a small reverse-mode
//! autodiff tape over dense `f64` tensors, so the whole stack is
//! gradient-checkable against finite differences.
//!
//! The crate is `no_std`-compatible (with `alloc`); all file formats, CLI
//! plumbing and IO live in the companion `blockflow-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod blocks;
pub mod cond;
pub mod error;
pub mod flow;
pub mod grad_check;
pub mod mathx;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
