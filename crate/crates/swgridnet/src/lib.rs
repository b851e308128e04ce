//! Grid-connected convolutional networks on a self-contained tensor kernel.
//!
//! The crate implements residual blocks whose inner function is a grid of
//! small convolutional processing units: the block input is projected and
//! split across the units, each unit averages the signals arriving from its
//! grid predecessors, and the unit outputs are concatenated and projected
//! back onto the block width. Because information may leave the grid after
//! visiting any number of units, one block embeds an ensemble of processing
//! paths whose depths span everything between "almost skip" and the full
//! grid diagonal.
//!
//! Modules:
//!
//! * [`tensor`] — dense tensors with reverse-mode automatic differentiation
//!   and a finite-difference gradient checker.
//! * [`topology`] — grid coordinates, edge structure, channel widths, and
//!   path-count combinatorics.
//! * [`model`] — the network itself: split/grid/join blocks, transitions,
//!   and the classifier head.
//! * [`train`] — warm-restart cosine learning-rate schedule, momentum SGD
//!   with weight decay, data augmentation, and the epoch loop.
//! * [`data`] — dataset loading (CIFAR-style binary records), a synthetic
//!   generator for self-contained runs, and batch assembly.
//! * [`checkpoint`] — binary serialization of network weights keyed by a
//!   digest of the network configuration.
//! * [`config`] — flat `key = value` run configuration files.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod model;
mod rng;
pub mod tensor;
pub mod topology;
pub mod train;

pub use error::{Error, Result};
