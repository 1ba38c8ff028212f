//! Masked autoregressive image generation in which text-condition tokens,
//! image-condition tokens and generated tokens share one sequence. A
//! block-structured attention policy decides who may see whom, and a small
//! per-token diffusion head models each continuous token.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffhead;
pub mod experiment;
pub mod error;
pub mod marloop;
pub mod model;
pub mod nn;
pub mod raster;
pub mod seqmask;
pub mod synthdata;
pub mod tokenize;

pub use candle_core::DType;
pub use error::{Error, Result};
pub use seqmask::{
    ablation_policy, build_attention_mask, intra_mask, reachability, AttentionMask,
    AttentionPolicy, IntraMode, Segment, SegmentLayout,
};
