//! Optical flow estimation with a capsule encoder.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]), capsule layers
//! with squash-free routing ([`capsule`]), FlowCaps-S and FlowNetS-style networks
//! ([`network`]), flow losses ([`loss`]), `.flo`/PPM I/O ([`flow_io`]), a synthetic
//! moving-shape dataset ([`synth`]), training and evaluation ([`train`]), and a shallow
//! motion classifier ([`classifier`]).

pub mod autodiff;
pub mod capsule;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod field;
pub mod flow_io;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod protocol;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use field::FlowField;
pub use real::Real;
pub use tensor::{Init, Tensor};
