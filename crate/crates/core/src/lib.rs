//! Virtual category learning for semi-supervised object detection.
//!
//! The crate is a desk-scale detector made of two linear heads on top of
//! synthetic proposal features. Unlabelled scenes are pseudo-labelled by an
//! EMA teacher; samples whose class cannot be settled are trained against a
//! per-sample virtual category instead of a concrete label.
//!
//! Module map:
//! - [`numcore`]: seeded randomness, dense linear heads, SGD and EMA.
//! - [`vcloss`]: virtual weights, extended logits and the ignore-masked loss.
//! - [`pseudo`]: box geometry, NMS, score filtering, proposal assignment.
//! - [`pcdisc`]: potential-category discovery and boundary quality flags.
//! - [`regloss`]: box deltas, Smooth-L1 and the flag-gated regression loss.
//! - [`synthbench`]: the synthetic benchmark with confusable classes.
//! - [`harness`]: training loop, AP evaluation, strategy comparison, gradient checks.

pub mod error;
pub mod harness;
pub mod numcore;
pub mod pcdisc;
pub mod pseudo;
pub mod regloss;
pub mod synthbench;
pub mod vcloss;

pub use error::{Error, Result};
