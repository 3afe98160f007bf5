//! Pixel-global self-supervised pretraining for dense prediction.
//!
//! A student network learns from an EMA teacher through a global
//! cross-entropy on pooled projections and a pixel-level consistency term.
//! Pixels are registered across the two augmented views with an exact
//! correspondence dictionary, the context gap is cancelled with a second
//! image pushed through the same augmentations, and each pixel is weighted
//! by the teacher's MC-dropout certainty.
//!
//! Everything runs on a small reverse-mode engine in [`tensor`].

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
