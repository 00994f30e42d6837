//! Multi-modal video saliency prediction with coarse-fine fusion.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`tape`]: dense `f64` tensors and reverse-mode autodiff;
//! - [`gradcheck`]: central-difference gradient oracle and check suite;
//! - [`attention`]: multi-head attention and positional encodings;
//! - [`model`]: autoencoders, fusion, interaction and the saliency head;
//! - [`training`]: Adam with decoupled weight decay;
//! - [`evaluation`]: AP, mAP and HIT@1;
//! - [`data`]: the CFST tensor format, manifests and synthetic data;
//! - [`run`]: config-driven train / eval runs used by the CLI.

pub mod attention;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{CfsumModel, ModelConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
