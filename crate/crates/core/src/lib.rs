//! Block-wise logit distillation.
//!
//! A frozen teacher and a smaller student are both split into `n` blocks at
//! their downsampling boundaries. Besides matching the teacher's output
//! logits, the student trains a set of hybrid "stepping-stone" models
//! `N_i = T_c ∘ T_n ∘ … ∘ T_{i+1} ∘ C_i ∘ S_i ∘ … ∘ S_1`, which align the
//! student's intermediate features with the teacher's by comparing logits
//! produced through the teacher's own tail. The stones and connectors are
//! dropped after training.
//!
//! Layout:
//! - [`tensor`]: reverse-mode autodiff over dense `f64` tensors
//! - [`nn`]: blocks, composite nets, connectors, and the architecture factory
//! - [`losses`]: task loss and temperature-scaled logit distance
//! - [`stones`]: stepping stones, ensemble, cross loss, total objective
//! - [`train`]: SGD, learning-rate schedule, training runs
//! - [`data`]: synthetic datasets, IDX-like ingestion
//! - [`checkpoint`]: binary checkpoint format
//! - [`theory`]: numerical checks of the gradient analysis
//! - [`config`]: experiment configuration
//! - [`gradcheck`]: tape gradients against finite differences

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod numdiff;
pub mod rng;
pub mod stones;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
