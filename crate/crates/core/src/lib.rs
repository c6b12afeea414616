//! Hybrid continuous–discrete variational autoencoders for recovering
//! latent site structure in connectome-style count data.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndgrad`] — a small reverse-mode autodiff engine over dense `f64`
//!   tensors (define-by-run tape, rebuilt every forward pass).
//! * [`data`] — synthetic connectome-like generators, ingestion of real
//!   matrix directories, normalization and a binary dataset cache.
//! * [`model`] — the joint VAE: MLP encoder with Gaussian and categorical
//!   heads, Gumbel-Softmax sampling, mirrored decoder, checkpointing.
//! * [`objectives`] — reconstruction and KL terms plus the four training
//!   objectives (plain β-weighted, hinge-capacity, loss-annealed KL,
//!   architectural annealing).
//! * [`trainer`] — Adam training loop with λ ramp schedule, loss logging
//!   and gradient clipping.
//! * [`baselines`] — PCA (Jacobi eigensolver, Gram trick) and k-means++
//!   used both as comparison methods and for latent post-processing.
//! * [`stats`] — clustering metrics (ARI, homogeneity), paired bootstrap
//!   and Welch's t-test.
//! * [`harness`] — experiment configs, sweep drivers and result files.
//!
//! Everything is deterministic: a single master seed fans out into named
//! PRNG streams ([`rng`]) and all parallel paths (feature `parallel`)
//! produce bit-identical results to the sequential fallback.

pub mod baselines;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod ndgrad;
pub mod objectives;
pub mod parallel;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
