//! Consistency learning of modality experts for missing-modality volumetric
//! segmentation, at desk scale.
//!
//! The crate trains a small multi-expert segmentation network on synthetic
//! multimodal phantoms. Each modality gets its own encoder; a weight-shared
//! expert decoder produces per-modality predictions whose pairwise agreement
//! is both regularized (global and region-focused consistency losses) and
//! reused as a reliability signal: a small gating network converts per-expert
//! consistency scores into fusion weights over the available modalities, and
//! a separate decoder segments the fused feature pyramid. Everything runs on
//! an in-crate reverse-mode tape with a finite-difference oracle.
//!
//! The `book/` directory of the repository walks through each piece; its code
//! snippets compile as doctests of the companion guide crate.

pub mod data;
pub mod error;
pub mod graph;
pub mod param;
pub mod real;
pub mod rng;
pub mod tensor;

pub use data::{AvailabilityMask, MultimodalSample, PhantomConfig, RegionHierarchy};
pub use error::{CloeError, Result};
pub use graph::{Graph, GradBug, Var};
pub use param::{ParamId, ParamSet};
pub use real::Real;
pub use tensor::{LabelVolume, Tensor};
