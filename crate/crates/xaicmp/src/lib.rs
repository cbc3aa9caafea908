//! Agreement analysis for post-hoc explanation methods on a toy Vision
//! Transformer.
//!
//! The crate trains a small deterministic ViT classifier on a synthetic
//! shapes dataset, generates attribution maps with six explanation methods
//! (Integrated Gradients, GradientSHAP, LIME, KernelSHAP, Attention Rollout,
//! gradient-weighted attention relevance), binarizes the maps into
//! comparable foreground masks, and quantifies pairwise agreement with
//! Intersection-over-Union and Coverage Ratio matrices rendered as CSV and
//! SVG heatmaps.
//!
//! Start with the runnable examples (`cargo run --example full_pipeline`) or
//! the `xaicmp` binary (`xaicmp run --config run.cfg --out out/`).

pub mod agreement;
pub mod attribution;
pub mod error;
pub mod formats;
pub mod maskpipe;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod vit;

pub mod cli;
pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
