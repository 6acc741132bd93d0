//! Shared test support: independent f64 reference implementations used as
//! oracles for gradient and architecture checks.

pub mod gradcheck;
pub mod reference;

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
