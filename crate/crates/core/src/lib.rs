//! Top-down human pose estimation at desk scale.
//!
//! The crate is organized around a small set of self-contained subsystems:
//!
//! - [`skeleton`]: keypoint layouts, person instances, and their invariants
//! - [`coco`]: COCO-format annotation / detection / result JSON I/O
//! - [`geometry`]: unit-length (corner-aligned) coordinate transforms, crops,
//!   warping, and the training augmentation pipeline
//! - [`heatmap`]: Gaussian heatmap encoding and continuous sub-pixel decoding
//! - [`oks`]: object keypoint similarity and the AP/AR evaluation protocol
//! - [`nn`] / [`micronet`]: a conditioned encoder-decoder with a class-embedding
//!   task switch, built on hand-rolled f64 layers with analytic gradients
//! - [`trainer`]: the multi-task loss, optimizers, deterministic training
//!   loops, and a finite-difference gradient checker
//! - [`synthdata`]: procedural stick-figure scenes with exact ground truth and
//!   an annotation-preserving appearance stylizer
//! - [`pipeline`]: sample assembly and single-pass inference wiring it together

pub mod coco;
pub mod config;
pub mod geometry;
pub mod heatmap;
pub mod image;
pub mod micronet;
pub mod nn;
pub mod oks;
pub mod oks_reference;
pub mod pipeline;
pub mod rng;
pub mod skeleton;
pub mod synthdata;
pub mod trainer;
