//! Soft contrastive representation learning with diffusion-generated
//! positives.
//!
//! A semantic encoder is trained with a soft contrastive loss over background
//! sets of positives and negatives; a conditional denoising diffusion model is
//! trained on the encoder's low-dimensional embedding and, once trained,
//! generates positives that replace hand-designed augmentations with
//! probability λ. The two are trained in alternating stages.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod losses;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Tensor;
