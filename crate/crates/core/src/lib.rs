//! Tail-aware post-training quantization toolkit.
//!
//! Provides twin uniform fake quantization, interval search by exhaustive
//! scan or ternary search, two-stage calibration-set construction, and
//! tail-error-gated low-rank compensation, all exercised on a small
//! built-in transformer.

pub mod bundle;
pub mod calibration;
pub mod compensation;
pub mod error;
pub mod interval_search;
pub mod numerics;
pub mod quantizer;
pub mod toynet;

pub use error::{Error, Result};
