//! Surface energy balance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CODATA 2018, W m^-2 K^-4.
pub const STEFAN_BOLTZMANN: f64 = 5.670374419e-8;

/// Radiative and turbulent fluxes at the land surface, all in W m^-2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBalanceInputs {
    pub sw_down: f64,
    pub sw_up: f64,
    pub lw_down: f64,
    pub sensible: f64,
    pub latent: f64,
    pub ground: f64,
    pub emissivity: f64,
}

impl EnergyBalanceInputs {
    /// Everything except the emitted longwave term.
    pub fn forcing(&self) -> f64 {
        self.sw_down - self.sw_up + self.emissivity * self.lw_down
            - (self.sensible + self.latent + self.ground)
    }

    /// Net surface energy left over at temperature `t`; zero at balance.
    pub fn residual(&self, t: f64) -> f64 {
        -self.emissivity * STEFAN_BOLTZMANN * t.powi(4) + self.forcing()
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.sw_down,
            self.sw_up,
            self.lw_down,
            self.sensible,
            self.latent,
            self.ground,
            self.emissivity,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        EnergyBalanceInputs {
            sw_down: a[0],
            sw_up: a[1],
            lw_down: a[2],
            sensible: a[3],
            latent: a[4],
            ground: a[5],
            emissivity: a[6],
        }
    }

    pub const FIELD_NAMES: [&'static str; 7] = [
        "sw_down",
        "sw_up",
        "lw_down",
        "sensible",
        "latent",
        "ground",
        "emissivity",
    ];
}

/// The surface temperature at which [`EnergyBalanceInputs::residual`]
/// vanishes.
pub fn equilibrium_temperature(e: &EnergyBalanceInputs) -> Result<f64> {
    if !(e.emissivity > 0.0) {
        return Err(Error::PhysicalState(format!(
            "emissivity must be positive, got {}",
            e.emissivity
        )));
    }
    let radicand = e.forcing() / (e.emissivity * STEFAN_BOLTZMANN);
    if !(radicand > 0.0) {
        return Err(Error::PhysicalState(format!(
            "net forcing {} W/m^2 admits no equilibrium temperature",
            e.forcing()
        )));
    }
    Ok(radicand.powf(0.25))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(sw_down: f64, emissivity: f64) -> EnergyBalanceInputs {
        EnergyBalanceInputs {
            sw_down,
            sw_up: 0.0,
            lw_down: 0.0,
            sensible: 0.0,
            latent: 0.0,
            ground: 0.0,
            emissivity,
        }
    }

    #[test]
    fn black_body_at_300() {
        let e = inputs(STEFAN_BOLTZMANN * 300f64.powi(4), 1.0);
        let t = equilibrium_temperature(&e).unwrap();
        assert!((t - 300.0).abs() < 1e-10);
        assert!(e.residual(t).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(equilibrium_temperature(&inputs(400.0, 0.0)).is_err());
        assert!(equilibrium_temperature(&inputs(-10.0, 0.95)).is_err());
    }

    #[test]
    fn residual_sign() {
        let e = inputs(STEFAN_BOLTZMANN * 300f64.powi(4), 1.0);
        assert!(e.residual(290.0) > 0.0);
        assert!(e.residual(310.0) < 0.0);
        let expected = STEFAN_BOLTZMANN * (300f64.powi(4) - 310f64.powi(4));
        assert!((e.residual(310.0) - expected).abs() < 1e-9);
    }
}
