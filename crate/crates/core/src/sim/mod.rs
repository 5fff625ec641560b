//! Simplified mechanistic forward models: physical state -> satellite
//! observation.
//!
//! Each model exposes two levels. The state level (`Pm1State`,
//! `Pm2State`) evaluates the radiative-transfer expressions on fully
//! specified per-band physical quantities. The reduced level
//! ([`MechanisticModel`]) maps a `k`-vector whose first coordinate is the
//! temperature label and whose remaining coordinates are physical drivers
//! onto `k` observed bands; this is the map the invertible surrogate learns.

pub mod energy;
pub mod pm1;
pub mod pm2;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use energy::{equilibrium_temperature, EnergyBalanceInputs, STEFAN_BOLTZMANN};
pub use pm1::{pm1_simulate, Pm1Band, Pm1Model, Pm1State, Polarization};
pub use pm2::{planck_radiance, pm2_simulate, Pm2Model, Pm2State, PLANCK_C1, PLANCK_C2};

/// A forward simulator over equal-length state and observation vectors.
pub trait MechanisticModel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Length of both the state vector and the observation vector.
    fn dim(&self) -> usize;

    /// Names of the state coordinates; index 0 is the temperature label.
    fn state_names(&self) -> Vec<&'static str>;

    /// Physically valid range of every state coordinate.
    fn state_bounds(&self) -> Vec<(f64, f64)>;

    fn simulate(&self, state: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    Pm1,
    Pm2,
}

impl SimKind {
    pub fn model(self) -> Box<dyn MechanisticModel> {
        match self {
            SimKind::Pm1 => Box::new(Pm1Model::default()),
            SimKind::Pm2 => Box::new(Pm2Model::default()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SimKind::Pm1 => "pm1",
            SimKind::Pm2 => "pm2",
        }
    }
}

impl std::str::FromStr for SimKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pm1" => Ok(SimKind::Pm1),
            "pm2" => Ok(SimKind::Pm2),
            other => Err(crate::error::Error::config(format!(
                "unknown simulator `{other}` (expected pm1 or pm2)"
            ))),
        }
    }
}

/// Simulates every row of `states`.
pub fn simulate_all(model: &dyn MechanisticModel, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    states.iter().map(|s| model.simulate(s)).collect()
}
