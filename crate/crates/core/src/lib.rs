//! Radial-boundary domain generalization for multimodal anti-spoofing,
//! exercised end to end on synthetic benchmarks.
//!
//! The crate bundles:
//! - a small 64-bit tensor/autodiff engine with second-order support
//!   ([`numerics`]),
//! - a synthetic multimodal, multi-domain data generator ([`synth`]),
//! - per-modality encoders with radial (norm-threshold) classifiers
//!   ([`model`]),
//! - invariance losses: cross-domain gradient alignment and angular
//!   domain separation ([`asyirm`]),
//! - frequency-mixing / shuffle-recovery pretext tasks ([`mmsd`]),
//! - numerical verification of the divergence and PAC-Bayes machinery
//!   behind the design ([`theory`]),
//! - a balanced-sampling trainer with HTER/AUC evaluation ([`trainer`]).

pub mod asyirm;
pub mod error;
pub mod mmsd;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Tensor, TokenMap};
