//! Sparse mixture-of-experts classifier for multimodal data where individual
//! samples may be missing entire modalities.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense f64 tensors, a reverse-mode autodiff tape, and a
//!   finite-difference gradient checker.
//! * [`modality`] — modality-set algebra: observation bitmasks, the canonical
//!   combination→expert index map, and the learnable missing-modality bank.
//! * [`encoder`] — per-modality MLP encoders and token-sequence assembly.
//! * [`smoe`] — the sparse mixture-of-experts layer: attention front-end,
//!   top-k gating, routing losses, and evaluation counters.
//! * [`model`] — the full network gluing encoders, bank, SMoE layers, and the
//!   prediction head together.
//! * [`data`] — synthetic dataset generation, CSV ingestion with mean
//!   imputation, and the train/val/test split protocol.
//! * [`train`] — curriculum ordering, the Adam loop, and checkpoints.
//! * [`metrics`] — accuracy / macro-F1 / macro AUC plus routing and bank
//!   analyses exported as CSV.
//! * [`selfcheck`] — an end-to-end gradient check of the whole pipeline
//!   against central finite differences on a conditioned reference instance.
//! * [`config`] — the flat TOML run configuration shared by the CLI and FFI.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod rng;
pub mod selfcheck;
pub mod smoe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
