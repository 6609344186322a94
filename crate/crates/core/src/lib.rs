//! Parameter-efficient ViT fine-tuning for open-set face forgery detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: `f64` tensors with a reverse-mode tape and a finite-difference oracle.
//! * [`backbone`]: a frozen plain ViT with PEFT attachment points.
//! * [`peft`]: LoRA on q/k/v and the central-difference-convolution adapter.
//! * [`style_mix`]: forgery style mixture over final token features.
//! * [`objective`]: binary cross-entropy plus single-center loss.
//! * [`pipeline`]: synthetic data, batch sampling, training and checkpoints.
//! * [`evaluation`]: ACC/AUC/EER, cross-domain protocol and perturbation sweeps.

pub mod backbone;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod peft;
pub mod pipeline;
pub mod rng;
pub mod style_mix;

pub use error::{Error, Result};

/// Whether a forward pass is part of training (mixture may fire) or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
