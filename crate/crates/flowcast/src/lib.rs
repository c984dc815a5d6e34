//! Grid traffic-flow forecasting with heterogeneity-aware self-supervised
//! auxiliary tasks.
//!
//! The crate is organised around a small reverse-mode autodiff substrate
//! ([`autodiff`]), a portable grid-flow dataset layer ([`data`]), the
//! gated-convolution graph encoder ([`model`]), adaptive graph augmentation
//! ([`augment`]), the two self-supervised objectives ([`ssl`]), and the
//! training/evaluation harness ([`train`]).

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod model;
pub mod ssl;
pub mod train;
