//! Text-conditioned keypoint localization at desk scale.
//!
//! A small multimodal decoder: a patch transformer encodes the query image,
//! a linear projection maps patch features into the language model width, and
//! a character-level decoder-only transformer emits keypoint coordinates as
//! digit tokens. The crate covers the full pipeline: instruction building,
//! supervised fine-tuning with answer-span masking, constrained coordinate
//! decoding under several sampling strategies, kernel density estimation over
//! sampled predictions, and a PCK evaluation harness with a synthetic
//! shape-category generator for unseen-category experiments.

pub mod checkpoint;
pub mod config;
pub mod codec;
pub mod data;
pub mod decode;
pub mod density;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod infer;
pub mod instructions;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
