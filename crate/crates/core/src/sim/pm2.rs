//! Thermal-infrared top-of-atmosphere radiance:
//!
//! ```text
//! R_i = (eps_i B_i(T_s) + (1 - eps_i) R_down_i) tau_i + R_up_i
//! ```
//!
//! with `B_i` the spectral Planck radiance at the band-centre wavelength.

use serde::{Deserialize, Serialize};

use super::MechanisticModel;
use crate::error::{Error, Result};
use crate::tape::Var;

/// First radiation constant, W um^4 m^-2 sr^-1.
pub const PLANCK_C1: f64 = 1.191042972e8;
/// Second radiation constant, um K.
pub const PLANCK_C2: f64 = 1.4387752e4;

/// Spectral radiance (W m^-2 sr^-1 um^-1) of a black body at `t` kelvin and
/// wavelength `lambda_um`.
pub fn planck_radiance(t: f64, lambda_um: f64) -> Result<f64> {
    if !(t > 0.0) || !(lambda_um > 0.0) {
        return Err(Error::PhysicalState(format!(
            "Planck radiance needs T > 0 and lambda > 0, got T = {t}, lambda = {lambda_um}"
        )));
    }
    Ok(PLANCK_C1 / (lambda_um.powi(5) * (PLANCK_C2 / (lambda_um * t)).exp_m1()))
}

/// Planck radiance of a `(n, 1)` temperature var; differentiable in `t`.
pub fn planck_var<'t>(t: Var<'t>, lambda_um: f64) -> Var<'t> {
    // c1 / (l^5 (exp(c2 / (l t)) - 1))
    t.pow(-1.0)
        .scale(PLANCK_C2 / lambda_um)
        .exp()
        .add_scalar(-1.0)
        .pow(-1.0)
        .scale(PLANCK_C1 / lambda_um.powi(5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pm2State {
    pub t_s: f64,
    pub emissivity: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub r_down: Vec<f64>,
    pub r_up: Vec<f64>,
}

impl Pm2State {
    pub fn validate(&self, bands: usize) -> Result<()> {
        let lens = [
            self.emissivity.len(),
            self.transmittance.len(),
            self.r_down.len(),
            self.r_up.len(),
        ];
        if lens.iter().any(|&l| l != bands) {
            return Err(Error::PhysicalState(format!(
                "per-band fields have lengths {lens:?}, expected {bands}"
            )));
        }
        for i in 0..bands {
            let (e, tau) = (self.emissivity[i], self.transmittance[i]);
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::PhysicalState(format!(
                    "emissivity[{i}] = {e} outside (0, 1]"
                )));
            }
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::PhysicalState(format!(
                    "transmittance[{i}] = {tau} outside [0, 1]"
                )));
            }
            if !(self.r_down[i] >= 0.0 && self.r_up[i] >= 0.0) {
                return Err(Error::PhysicalState(format!(
                    "band {i}: negative atmospheric radiance"
                )));
            }
        }
        Ok(())
    }
}

/// Radiance of every band given the per-band Planck radiances `b`.
pub fn pm2_from_planck(state: &Pm2State, b: &[f64]) -> Result<Vec<f64>> {
    state.validate(b.len())?;
    Ok((0..b.len())
        .map(|i| {
            let e = state.emissivity[i];
            (e * b[i] + (1.0 - e) * state.r_down[i]) * state.transmittance[i] + state.r_up[i]
        })
        .collect())
}

/// TOA radiance per band centre `wavelengths_um`.
pub fn pm2_simulate(state: &Pm2State, wavelengths_um: &[f64]) -> Result<Vec<f64>> {
    let b = wavelengths_um
        .iter()
        .map(|&l| planck_radiance(state.t_s, l))
        .collect::<Result<Vec<_>>>()?;
    pm2_from_planck(state, &b)
}

/// Differentiable radiance of band `i` for a `(n, 1)` surface temperature.
pub fn pm2_band_var<'t>(t_s: Var<'t>, state: &Pm2State, i: usize, lambda_um: f64) -> Var<'t> {
    let e = state.emissivity[i];
    let tau = state.transmittance[i];
    planck_var(t_s, lambda_um)
        .scale(e * tau)
        .add_scalar((1.0 - e) * state.r_down[i] * tau + state.r_up[i])
}

/// Reduced PM2 model over `[T_s, broadband emissivity, precipitable
/// water (cm), surface-minus-air temperature (K)]`.
///
/// Band emissivities are offsets of the broadband value; transmittance
/// decays exponentially with water vapour along the slant path; the
/// atmosphere radiates as a grey layer at `T_s - dT` with emissivity
/// `1 - tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pm2Model {
    pub wavelengths_um: Vec<f64>,
    pub emissivity_offsets: Vec<f64>,
    pub absorption: Vec<f64>,
    pub view_zenith_deg: f64,
}

impl Default for Pm2Model {
    fn default() -> Self {
        Pm2Model {
            wavelengths_um: vec![3.9, 8.6, 10.9, 12.0],
            emissivity_offsets: vec![-0.06, -0.04, 0.0, 0.01],
            absorption: vec![0.08, 0.12, 0.07, 0.14],
            view_zenith_deg: 10.0,
        }
    }
}

impl Pm2Model {
    pub fn expand(&self, state: &[f64]) -> Result<Pm2State> {
        if state.len() != 4 {
            return Err(Error::PhysicalState(format!(
                "PM2 reduced state has 4 coordinates, got {}",
                state.len()
            )));
        }
        let (t_s, eps0, water, dt) = (state[0], state[1], state[2], state[3]);
        let slant = 1.0 / self.view_zenith_deg.to_radians().cos();
        let t_air = t_s - dt;
        let mut out = Pm2State {
            t_s,
            emissivity: Vec::new(),
            transmittance: Vec::new(),
            r_down: Vec::new(),
            r_up: Vec::new(),
        };
        for (i, &l) in self.wavelengths_um.iter().enumerate() {
            let e = (eps0 + self.emissivity_offsets[i]).clamp(0.5, 1.0);
            let tau = (-self.absorption[i] * water * slant).exp();
            let b_air = planck_radiance(t_air, l)?;
            out.emissivity.push(e);
            out.transmittance.push(tau);
            out.r_up.push((1.0 - tau) * b_air);
            out.r_down.push((1.0 - tau) * b_air * 1.1);
        }
        Ok(out)
    }
}

impl MechanisticModel for Pm2Model {
    fn name(&self) -> &'static str {
        "pm2"
    }

    fn dim(&self) -> usize {
        self.wavelengths_um.len()
    }

    fn state_names(&self) -> Vec<&'static str> {
        vec!["temperature", "emissivity", "water_vapor", "air_offset"]
    }

    fn state_bounds(&self) -> Vec<(f64, f64)> {
        vec![(240.0, 330.0), (0.90, 0.99), (0.2, 5.0), (-4.0, 16.0)]
    }

    fn simulate(&self, state: &[f64]) -> Result<Vec<f64>> {
        pm2_simulate(&self.expand(state)?, &self.wavelengths_um)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn state(e: f64, tau: f64, down: f64, up: f64) -> Pm2State {
        Pm2State {
            t_s: 300.0,
            emissivity: vec![e],
            transmittance: vec![tau],
            r_down: vec![down],
            r_up: vec![up],
        }
    }

    #[test]
    fn planck_reference_value() {
        // independent Python evaluation of the same closed form
        let b = planck_radiance(300.0, 10.9).unwrap();
        assert!((b - 9.622713378283562).abs() < 1e-9, "{b}");
    }

    #[test]
    fn planck_monotone_and_vanishing() {
        let mut prev = 0.0;
        for t in (50..400).step_by(10) {
            let b = planck_radiance(t as f64, 10.9).unwrap();
            assert!(b > prev);
            prev = b;
        }
        assert!(planck_radiance(1.0, 10.9).unwrap() < 1e-200);
        assert!(planck_radiance(0.0, 10.9).is_err());
        assert!(planck_radiance(300.0, -1.0).is_err());
    }

    #[test]
    fn black_body_clear_sky() {
        let b = planck_radiance(300.0, 10.9).unwrap();
        let r = pm2_simulate(&state(1.0, 1.0, 3.0, 0.0), &[10.9]).unwrap();
        assert!((r[0] - b).abs() < 1e-12);
    }

    #[test]
    fn hand_case() {
        let r = pm2_from_planck(&state(0.95, 0.8, 2.0, 1.0), &[10.0]).unwrap();
        assert!((r[0] - 8.68).abs() < 1e-12, "{}", r[0]);
    }

    #[test]
    fn opaque_atmosphere() {
        let r = pm2_simulate(&state(0.97, 0.0, 2.0, 1.7), &[10.9]).unwrap();
        assert_eq!(r[0], 1.7);
    }

    #[test]
    fn rejects_bad_emissivity() {
        assert!(pm2_simulate(&state(0.0, 0.5, 1.0, 1.0), &[10.9]).is_err());
        assert!(pm2_simulate(&state(1.1, 0.5, 1.0, 1.0), &[10.9]).is_err());
    }

    #[test]
    fn planck_var_matches_and_differentiates() {
        let tape = Tape::new();
        let t = tape.leaf(&Tensor::new(vec![1, 1], vec![300.0]).unwrap().with_grad());
        let b = planck_var(t, 10.9);
        assert!((b.item() - planck_radiance(300.0, 10.9).unwrap()).abs() < 1e-12);
        let g = tape.backward(b.sum()).unwrap().get(t).unwrap()[0];
        let h = 1e-4;
        let fd = (planck_radiance(300.0 + h, 10.9).unwrap()
            - planck_radiance(300.0 - h, 10.9).unwrap())
            / (2.0 * h);
        assert!((g - fd).abs() / fd < 1e-7);
    }
}
