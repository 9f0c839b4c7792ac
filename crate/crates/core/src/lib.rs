//! Compositional contrastive distillation over multi-modal embedding tables.
//!
//! A student encoder learns from frozen audio and image teacher embeddings.
//! Composition heads shift each teacher embedding toward the student's class
//! semantics, multi-class NCE pulls same-class rows together across
//! modalities, and a symmetric KL term aligns the class predictions of the
//! student and composed branches.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below are what training and gradient checks use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod model;
mod scalar;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

/// Floor applied to norms and to the arguments of logarithms.
pub const EPS_FLOOR: f64 = 1e-12;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Dataset64 = data::EmbeddingDataset<f64>;
pub type Dataset32 = data::EmbeddingDataset<f32>;
pub type Batch64 = data::Batch<f64>;
pub type Params64 = model::ModelParams<f64>;
pub type Params32 = model::ModelParams<f32>;
pub type Tape64 = tape::Tape<f64>;
