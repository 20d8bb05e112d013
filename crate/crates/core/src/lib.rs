//! Frame-matching stability benchmark.
//!
//! The crate measures how well consecutive video frames can be registered
//! to each other, and how far ahead a frame can still be registered, so that
//! the effect of image enhancement on feature matching can be quantified.
//!
//! Pipeline: [`imgio`] decodes netpbm frames, [`enhance`] applies a classical
//! enhancer, [`features`] extracts ORB-style keypoints and 256-bit binary
//! descriptors, [`matchgeom`] matches descriptors and fits homographies with
//! RANSAC, and [`metrics`] aggregates pair outcomes into local matching
//! stability (LMS) profiles and furthest matchable frame (FMF) records.
//! [`synthgen`] renders sequences with known camera motion for validation and
//! [`report`] formats multi-run tables and plot data.
//!
//! Per-frame and per-pair work is data-parallel through [`par`]; with the
//! `parallel` feature disabled everything runs sequentially and produces the
//! same bytes.

pub mod enhance;
pub mod features;
pub mod imgio;
pub mod matchgeom;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod synthgen;

pub use imgio::{Frame, FrameSequence, GrayFrame};

/// Toolkit version recorded in every run manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
