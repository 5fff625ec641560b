//! Passive-microwave top-of-atmosphere brightness temperature over a
//! vegetated soil (tau-omega zero-order emission).
//!
//! Per band `(p, theta)`:
//!
//! ```text
//! TB = (1 - r) T_eff e^{-tau} + TB_veg (1 + r e^{-tau}) + TB_ad r e^{-2 tau}
//! ```
//!
//! The upward atmospheric term is folded into `TB_ad`.

use serde::{Deserialize, Serialize};

use super::MechanisticModel;
use crate::error::{Error, Result};
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    H,
    V,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pm1Band {
    pub pol: Polarization,
    pub theta_deg: f64,
}

impl Pm1Band {
    pub fn label(&self) -> String {
        format!("{:?}{}", self.pol, self.theta_deg)
    }
}

/// `{H, V} x {40, 55}` degrees.
pub fn default_bands() -> Vec<Pm1Band> {
    let mut out = Vec::new();
    for pol in [Polarization::H, Polarization::V] {
        for theta_deg in [40.0, 55.0] {
            out.push(Pm1Band { pol, theta_deg });
        }
    }
    out
}

/// Fully specified per-band physical state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pm1State {
    pub t_eff: f64,
    pub t_bveg: Vec<f64>,
    pub t_bad: Vec<f64>,
    pub reflectivity: Vec<f64>,
    pub tau: Vec<f64>,
}

impl Pm1State {
    pub fn validate(&self, bands: usize) -> Result<()> {
        let lens = [
            self.t_bveg.len(),
            self.t_bad.len(),
            self.reflectivity.len(),
            self.tau.len(),
        ];
        if lens.iter().any(|&l| l != bands) {
            return Err(Error::PhysicalState(format!(
                "per-band fields have lengths {lens:?}, expected {bands}"
            )));
        }
        if !self.t_eff.is_finite() || self.t_eff < 0.0 {
            return Err(Error::PhysicalState(format!("T_eff = {}", self.t_eff)));
        }
        for (i, &r) in self.reflectivity.iter().enumerate() {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::PhysicalState(format!(
                    "reflectivity[{i}] = {r} outside [0, 1]"
                )));
            }
        }
        for (i, &t) in self.tau.iter().enumerate() {
            if !(t >= 0.0) {
                return Err(Error::PhysicalState(format!("tau[{i}] = {t} is negative")));
            }
        }
        for (i, (&v, &a)) in self.t_bveg.iter().zip(&self.t_bad).enumerate() {
            if !(v >= 0.0 && a >= 0.0) {
                return Err(Error::PhysicalState(format!(
                    "band {i}: TB_veg = {v}, TB_ad = {a} must be nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// Brightness temperature of every band.
pub fn pm1_simulate(state: &Pm1State, bands: &[Pm1Band]) -> Result<Vec<f64>> {
    state.validate(bands.len())?;
    Ok((0..bands.len())
        .map(|b| {
            let r = state.reflectivity[b];
            let gamma = (-state.tau[b]).exp();
            (1.0 - r) * state.t_eff * gamma
                + state.t_bveg[b] * (1.0 + r * gamma)
                + state.t_bad[b] * r * gamma * gamma
        })
        .collect())
}

/// Batched, differentiable form of [`pm1_simulate`] for one band. Every
/// argument is a `(n, 1)` var.
pub fn pm1_band_var<'t>(
    t_eff: Var<'t>,
    t_bveg: Var<'t>,
    t_bad: Var<'t>,
    r: Var<'t>,
    tau: Var<'t>,
) -> Result<Var<'t>> {
    let gamma = tau.neg().exp();
    let soil = r.neg().add_scalar(1.0).mul(t_eff)?.mul(gamma)?;
    let r_gamma = r.mul(gamma)?;
    let veg = t_bveg.mul(r_gamma.add_scalar(1.0))?;
    let atm = t_bad.mul(r_gamma)?.mul(gamma)?;
    soil.add(veg)?.add(atm)
}

/// Reduced PM1 model over `[T, soil wetness, nadir vegetation optical
/// depth at H, the same at V]`.
///
/// Soil reflectivity grows linearly with wetness and splits by
/// polarisation with `sin^2(theta)`; the optical depth scales with the
/// slant path `1 / cos(theta)`; the canopy emits at the surface
/// temperature with single-scattering albedo `omega`; the downward
/// atmospheric TB follows the surface temperature linearly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pm1Model {
    pub bands: Vec<Pm1Band>,
    pub omega: f64,
    pub r_dry: f64,
    pub r_slope: f64,
    pub pol_split: f64,
    /// Downward atmospheric TB at 250 K and its slope per kelvin.
    pub t_ad_base: f64,
    pub t_ad_slope: f64,
}

impl Default for Pm1Model {
    fn default() -> Self {
        Pm1Model {
            bands: default_bands(),
            omega: 0.05,
            r_dry: 0.05,
            r_slope: 0.9,
            pol_split: 0.9,
            t_ad_base: 6.0,
            t_ad_slope: 0.2,
        }
    }
}

impl Pm1Model {
    /// Expands a reduced state vector into the per-band physical state.
    pub fn expand(&self, state: &[f64]) -> Result<Pm1State> {
        if state.len() != 4 {
            return Err(Error::PhysicalState(format!(
                "PM1 reduced state has 4 coordinates, got {}",
                state.len()
            )));
        }
        let (t, wetness, tau_h, tau_v) = (state[0], state[1], state[2], state[3]);
        let t_ad = (self.t_ad_base + self.t_ad_slope * (t - 250.0)).max(0.0);
        let r0 = self.r_dry + self.r_slope * wetness;
        let mut out = Pm1State {
            t_eff: t,
            t_bveg: Vec::new(),
            t_bad: Vec::new(),
            reflectivity: Vec::new(),
            tau: Vec::new(),
        };
        for band in &self.bands {
            let theta = band.theta_deg.to_radians();
            let s2 = theta.sin().powi(2);
            let (r, tau) = match band.pol {
                Polarization::H => (r0 * (1.0 + self.pol_split * s2), tau_h / theta.cos()),
                Polarization::V => (r0 * (1.0 - self.pol_split * s2), tau_v / theta.cos()),
            };
            let gamma = (-tau).exp();
            out.reflectivity.push(r);
            out.tau.push(tau);
            out.t_bveg.push((1.0 - self.omega) * (1.0 - gamma) * t);
            out.t_bad.push(t_ad / theta.cos().sqrt());
        }
        Ok(out)
    }
}

impl MechanisticModel for Pm1Model {
    fn name(&self) -> &'static str {
        "pm1"
    }

    fn dim(&self) -> usize {
        self.bands.len()
    }

    fn state_names(&self) -> Vec<&'static str> {
        vec!["temperature", "wetness", "tau_h", "tau_v"]
    }

    fn state_bounds(&self) -> Vec<(f64, f64)> {
        vec![(230.0, 320.0), (0.02, 0.45), (0.05, 0.6), (0.05, 1.0)]
    }

    fn simulate(&self, state: &[f64]) -> Result<Vec<f64>> {
        pm1_simulate(&self.expand(state)?, &self.bands)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn single(t_eff: f64, t_bveg: f64, t_bad: f64, r: f64, tau: f64) -> Pm1State {
        Pm1State {
            t_eff,
            t_bveg: vec![t_bveg],
            t_bad: vec![t_bad],
            reflectivity: vec![r],
            tau: vec![tau],
        }
    }

    fn one_band() -> Vec<Pm1Band> {
        vec![Pm1Band {
            pol: Polarization::H,
            theta_deg: 40.0,
        }]
    }

    #[test]
    fn transparent_bare_soil() {
        let out = pm1_simulate(&single(287.5, 0.0, 0.0, 0.0, 0.0), &one_band()).unwrap();
        assert_eq!(out, vec![287.5]);
    }

    #[test]
    fn hand_case() {
        // 0.8*280*0.5 + 260*1.1 + 100*0.2*0.25
        let out = pm1_simulate(
            &single(280.0, 260.0, 100.0, 0.2, std::f64::consts::LN_2),
            &one_band(),
        )
        .unwrap();
        assert!((out[0] - 403.0).abs() < 1e-10, "{}", out[0]);
    }

    #[test]
    fn opaque_canopy_limit() {
        let out = pm1_simulate(&single(280.0, 250.0, 30.0, 0.3, 60.0), &one_band()).unwrap();
        assert!((out[0] - 250.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_states_rejected() {
        assert!(pm1_simulate(&single(280.0, 0.0, 0.0, 1.2, 0.1), &one_band()).is_err());
        assert!(pm1_simulate(&single(280.0, 0.0, 0.0, 0.2, -0.1), &one_band()).is_err());
        assert!(pm1_simulate(&single(280.0, 0.0, 0.0, 0.2, 0.1), &default_bands()).is_err());
    }

    #[test]
    fn var_form_matches() {
        let tape = Tape::new();
        let c = |v: f64| tape.constant(Tensor::new(vec![1, 1], vec![v]).unwrap());
        let v = pm1_band_var(
            c(280.0),
            c(260.0),
            c(100.0),
            c(0.2),
            c(std::f64::consts::LN_2),
        )
        .unwrap()
        .item();
        assert!((v - 403.0).abs() < 1e-10);
    }

    #[test]
    fn reduced_model_stays_in_bounds() {
        let m = Pm1Model::default();
        let bounds = m.state_bounds();
        for corner in 0..16 {
            let s: Vec<f64> = bounds
                .iter()
                .enumerate()
                .map(|(i, b)| if corner >> i & 1 == 1 { b.1 } else { b.0 })
                .collect();
            let st = m.expand(&s).unwrap();
            st.validate(4).unwrap();
            let x = m.simulate(&s).unwrap();
            assert!(x.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
