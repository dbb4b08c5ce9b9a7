//! Online spatiotemporal tube (STT) synthesis and approximation-free funnel
//! control for temporal reach-avoid-stay navigation among moving obstacles.
//!
//! The crate is organised along the closed loop it simulates:
//!
//! - [`env`]: the reach-avoid-stay task, obstacle motions and sensing.
//! - [`tube`]: the tube `B(σ(t), ρ(t))`, advanced in real time from the
//!   obstacles currently in view.
//! - [`controller`]: the closed-form, model-free N-stage funnel law that keeps
//!   the plant output inside the tube.
//! - [`plant`]: simulated pure-feedback plants with bounded disturbances.
//! - [`sim`]: the fixed-step episode runner, logs, audits and metrics.
//! - [`bench`]: randomized scenario generation and aggregate evaluation.
//! - [`scenario`]: the JSON scenario file format and the bundled scenarios.
//!
//! All vectors are stored as [`Vector`] (three components). Planar scenarios
//! keep the third component at zero; [`Dims`] says how many components are
//! meaningful.

pub mod bench;
pub mod controller;
pub mod env;
mod error;
pub mod plant;
pub mod scenario;
pub mod sim;
pub mod tube;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Workspace-frame vector. Planar problems leave `z` at zero.
pub type Vector = nalgebra::Vector3<f64>;

/// Number of meaningful workspace axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Dims {
    Two,
    Three,
}

impl Dims {
    pub fn n(self) -> usize {
        match self {
            Dims::Two => 2,
            Dims::Three => 3,
        }
    }

    /// Copies the first `n` components of `v` into a `Vec`.
    pub fn truncate(self, v: &Vector) -> Vec<f64> {
        v.as_slice()[..self.n()].to_vec()
    }

    /// Builds a [`Vector`] from exactly `n` components.
    pub fn vector(self, components: &[f64]) -> Result<Vector> {
        if components.len() != self.n() {
            return Err(Error::Config(format!(
                "expected a {}-component vector, got {}",
                self.n(),
                components.len()
            )));
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config(format!("non-finite vector {components:?}")));
        }
        let mut v = Vector::zeros();
        v.as_mut_slice()[..components.len()].copy_from_slice(components);
        Ok(v)
    }
}

impl TryFrom<u8> for Dims {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, Self::Error> {
        match value {
            2 => Ok(Dims::Two),
            3 => Ok(Dims::Three),
            other => Err(format!("dims must be 2 or 3, got {other}")),
        }
    }
}

impl From<Dims> for u8 {
    fn from(d: Dims) -> u8 {
        d.n() as u8
    }
}
