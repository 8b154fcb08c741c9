//! Style feature extraction from unlabeled images.
//!
//! A contrastive model is pretrained to produce augmentation-invariant
//! content codes; a conditional VAE, conditioned on those frozen codes,
//! then learns a latent that captures the remaining style variation. A
//! statistics network estimates the mutual information between the two
//! codes, and training minimizes the CVAE loss while an adversarial
//! ascent keeps the MI estimate tight, pushing content out of the style
//! latent.
//!
//! Pipeline stages map to CLI subcommands:
//! - `generate-data` — synthetic glyphs with known style factors, or MNIST IDX ingestion
//! - `train-cl` — MoCo-style contrastive pretraining (stage 1)
//! - `train-cvae` — adversarial CVAE + statistics-network training (stage 2)
//! - `eval` — figure grids and linear-probe reports
//! - `mi-sanity` — standalone Gaussian check of the MI estimators

pub mod augment;
pub mod checkpoint;
pub mod cl;
pub mod cli;
pub mod config;
pub mod cvae;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod mi_sanity;
pub mod models;
pub mod nn;
pub mod rng;

pub use error::{Result, StylexError};
