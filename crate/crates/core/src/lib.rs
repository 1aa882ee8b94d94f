//! Rotated-bounding-box ship detection.
//!
//! A two-stage detector for elongated, arbitrarily-oriented targets:
//!
//! 1. **Features** — a small convolutional backbone followed by active
//!    rotating filter (ARF) layers whose rotated clones share weights,
//!    plus orientation max-pooling for rotation-invariant maps.
//! 2. **Proposals** — a dual-branch rotated region proposal network:
//!    `(x, y, w, h)` regressed from rotation-invariant features against
//!    orientation-agnostic anchors, θ regressed from rotation-sensitive
//!    features against six fixed orientation bins.
//! 3. **Pooling** — ring-like shape-adaptive pooling on enlarged
//!    proposals, with the outer sample ring drawn from lower feature
//!    levels and the inner ring from higher ones.
//! 4. **Refinement** — two fully-connected heads producing final scores
//!    and rotated-box offsets, followed by rotated NMS.
//!
//! Everything is built on a minimal dense-tensor engine with analytic
//! gradients (verified against finite differences), so the whole
//! pipeline trains end-to-end on CPU at desk scale.

pub mod arf;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod mlap;
pub mod ops;
pub mod real;
pub mod rpn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::RotatedBox;
pub use real::Real;
pub use tensor::{Param, Tensor4};
