//! Two-phase local training for belief-refinement pipelines.
//!
//! A shared feature extractor feeds `L` modules; module `i` refines belief
//! `p_{i-1}` into `p_i`. Training runs a gradient-free teacher pass, then
//! updates every module independently (and in parallel) against
//! `alpha * KL(p_i || p_y) + (1 - alpha) * KL(p_i || sg(p_{i-1}))`.
//!
//! The crate also carries the closed-form theory of the ideal cascade
//! ([`cascade`]), an end-to-end backpropagation baseline ([`bp`]), desk-scale
//! datasets ([`data`]) and a cost/memory projection model ([`profiler`]).

pub mod bp;
pub mod cascade;
pub mod check;
pub mod data;
pub mod error;
pub mod grad;
pub mod math;
pub mod memory;
pub mod network;
pub mod optim;
pub mod profiler;
pub mod report;
pub mod sid;
pub mod train;

pub use error::{Result, SidError};
pub use math::{argmax_class, kl_div, smooth_onehot, softmax, Belief, Mat};
pub use network::{init_pipeline, pipeline_forward, PipelineDims, PipelineParams};
pub use report::{ExtractorStrategy, TrainConfig, TrainReport};
