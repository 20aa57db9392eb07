//! Core algorithms for automatic coronary calcium scoring in non-contrast
//! cardiac and chest CT.
//!
//! The pipeline has two stages. First a small regression ConvNet aligns a
//! heavily downsampled volume to an atlas with a constrained rigid transform
//! (in-plane rotation, anisotropic scale, translation), trained without
//! labels by maximising normalised cross correlation. Second, per-slice
//! regression ConvNets predict calcium burden directly from atlas-aligned
//! axial slices, trained against reference scores on a log scale. Offline
//! analysis inverts the slice predictions to Agatston-equivalent scores,
//! aggregates them per volume, assigns cardiovascular risk categories, and
//! renders attention heatmaps by backprojecting through the scoring network.
//!
//! Everything here is deterministic given explicit seeds, single threaded,
//! and exercised against brute-force reference implementations in the test
//! suites.
//!
//! Numeric conventions, used throughout:
//!
//! * CT numbers are `i16` HU in [-1024, 3071]; samples outside a grid read
//!   as -1000 HU (air).
//! * Sampling coordinates are array indices; voxel (i, j, k) sits at
//!   coordinate (i, j, k). Geometric transforms act about the grid centre,
//!   and producers of sample points add the centre offsets.
//! * Network parameters and activations store in a caller-chosen float type
//!   (f32 in production); every reduction (convolution taps, dense layers,
//!   statistics, losses, optimiser state) accumulates in f64 with a fixed
//!   association order, so results are bit-reproducible across runs.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod agatston;
pub mod error;
pub mod gradnet;
pub mod lesion;
pub mod real;
pub mod rng;
pub mod statseval;
pub mod volgrid;
pub mod xform;

pub use error::{CoreError, Result};
