//! Semi-supervised segmentation of cyclic 4D volumes.
//!
//! The crate trains a student/teacher pair of small 3D U-Nets on synthetic
//! deforming-valve sequences where only two phases per sequence carry labels.
//! Two mechanisms propagate supervision to the unlabeled phases: a
//! bi-directional memory bank that lets each phase attend over features of its
//! temporal neighbors, and a topology regularizer that keeps surface area and
//! volume consistent across the cycle.
//!
//! Modules:
//! - [`tensor`], [`autograd`]: dense f64 tensors and the reverse-mode tape.
//! - [`data`]: phantom generation, sequence I/O, resampling.
//! - [`network`]: the segmentation backbone and checkpoints.
//! - [`memory`]: forward/backward feature banks with top-k attention readout.
//! - [`ssl`]: mean-teacher training loop, losses, optimizer.
//! - [`topo`]: differentiable surface/volume consistency terms.
//! - [`metrics`]: Dice, HD95, conformity, report emission.
//! - [`harness`]: gradient checks, oracle suite, ablation benchmark.

pub mod autograd;
pub mod data;
pub mod error;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod network;
pub mod ssl;
pub mod tensor;
pub mod topo;

pub use error::{Error, Result};
