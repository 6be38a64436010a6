//! Structure-preserving Cycle-GAN domain adaptation for image segmentation.
//!
//! A Cycle-GAN translates labelled source-domain images into an unlabelled
//! target domain while a co-trained segmenter penalizes translations that lose
//! the labelled structures. The crate covers the losses, networks, dataset
//! handling, training loops, Dice evaluation and experiment orchestration.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod nn;
pub mod synth;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
