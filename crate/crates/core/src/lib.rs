//! Sparse pillar-query decoder for multi-camera 3D object detection.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`] dense-array kernels (linear, softmax, layer norm, bilinear sampling)
//! * [`geometry`] rigid transforms, ego poses and pinhole cameras
//! * [`scene`] a deterministic synthetic world that renders feature pyramids
//! * [`queries`] pillar-shaped query boxes and their features
//! * [`attention`] distance-biased multi-head self attention over queries
//! * [`sampling`] query-driven spatio-temporal feature sampling with motion warps
//! * [`mixing`] query-conditioned channel and point mixing plus prediction heads
//! * [`decoder`] the weight-shared layer stack and parameter serialization
//! * [`training`] set matching, losses and a forward-only SPSA fit harness
//! * [`metrics`] center-distance mAP, true-positive errors and the composite score
//! * [`plot`] SVG emitters for sampling points and receptive-field statistics

pub mod attention;
pub mod config;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod mixing;
pub mod numerics;
pub mod plot;
pub mod queries;
pub mod sampling;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
