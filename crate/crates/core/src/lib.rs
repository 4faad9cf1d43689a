//! Perspective-aware crowd counting at desk scale.
//!
//! A rough network predicts a coarse density map; a negative linear transform
//! turns it into a per-position dilation map consumed by refined dilated
//! convolutions in the precise network. Training is two-stage: a teacher is
//! fit to Gaussian targets, its count-corrected predictions become the
//! student's targets.
//!
//! # Features
//!
//! - `parallel` *(default)* – batch, image, and channel loops run on rayon.
//!   Results are bit-identical to the sequential path; see [`par`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod densitygen;
pub mod drf;
mod error;
pub mod experiments;
pub mod metrics;
pub mod nets;
pub mod par;
pub mod rfanalysis;
pub mod sds;
pub mod synthdata;

pub use error::{Error, Result, Stage};
