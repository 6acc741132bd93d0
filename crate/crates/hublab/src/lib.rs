//! # hublab
//!
//! A desk-scale laboratory for studying how a single language model
//! represents multiple data types in one residual stream. The crate trains
//! a small decoder-only transformer from scratch on synthetic corpora that
//! mix two surface "languages", arithmetic in numeral and word form, and
//! code-like list literals, then probes the trained model:
//!
//! - **logit lens** readouts of intermediate layers, anchor-token
//!   comparisons, and per-layer language distributions;
//! - **representation similarity** between parallel inputs across data
//!   types, with non-matching baselines and PCA trajectories;
//! - **causal interventions**: contrast-vector steering, targeted-position
//!   addition, unembedding-difference steering, and hidden-state
//!   replacement.
//!
//! Everything runs on CPU in minutes and is bit-reproducible under a fixed
//! seed. Start with the examples:
//!
//! ```bash
//! cargo run --release --example train_tiny
//! cargo run --release --example lens_anchor
//! cargo run --release --example steer_arithmetic
//! ```
//!
//! or drive full experiments through the `hublab` binary (see the README).

pub mod corpora;
pub mod error;
pub mod rng;
pub mod model;
pub mod stats;
pub mod trainer;
pub mod tensor;

pub use error::{HubError, Result};
