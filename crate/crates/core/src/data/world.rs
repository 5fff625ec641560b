//! Synthetic spatio-temporal worlds.
//!
//! A latent surface-temperature field (latitude gradient, seasonal cycle,
//! elevation lapse, a smooth random spatial field and AR(1) weather) drives
//! the simulator state of every station-day. East of `regime_lon` the
//! simulator parameters sit in a different regime, scaled by
//! `shift_strength`; that regime change is the distribution shift between
//! regions. Observations are the simulator output plus Gaussian noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Columns, StDataset, Station, ENERGY_PREFIX};
use crate::error::{Error, Result};
use crate::losses::LocationId;
use crate::sim::{EnergyBalanceInputs, MechanisticModel, SimKind, STEFAN_BOLTZMANN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub stations: usize,
    pub days: usize,
    /// Keep every `time_stride`-th day. The weather process still evolves
    /// daily, so a strided world is a subsample of the daily one.
    pub time_stride: usize,
    pub sim: SimKind,
    pub shift_strength: f64,
    /// Observation noise standard deviation as a fraction of each band's
    /// range over the world.
    pub noise_frac: f64,
    pub lon_range: (f64, f64),
    pub lat_range: (f64, f64),
    /// Stations east of this longitude use the shifted parameter regime.
    pub regime_lon: f64,
    /// PM1 H-pol vegetation optical depth added in the east at shift
    /// strength 1; V-pol depth follows at 1.5 times H.
    pub tau_offset: f64,
    /// PM1 soil wetness added in the east at shift strength 1.
    pub wetness_offset: f64,
    /// PM2 broadband emissivity added in the east at shift strength 1.
    pub emissivity_offset: f64,
    /// PM2 precipitable water (cm) added in the east at shift strength 1.
    pub water_offset: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            stations: 120,
            days: 365,
            time_stride: 1,
            sim: SimKind::Pm1,
            shift_strength: 1.0,
            noise_frac: 0.01,
            lon_range: (-125.0, -67.0),
            lat_range: (25.0, 49.0),
            regime_lon: -100.0,
            tau_offset: 0.25,
            wetness_offset: 0.12,
            emissivity_offset: -0.03,
            water_offset: 1.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.stations < 2 {
            return bad(format!(
                "a world needs at least 2 stations, got {}",
                self.stations
            ));
        }
        if self.days == 0 || self.time_stride == 0 {
            return bad(format!(
                "days ({}) and time_stride ({}) must be positive",
                self.days, self.time_stride
            ));
        }
        if !(self.noise_frac >= 0.0 && self.noise_frac.is_finite()) {
            return bad(format!(
                "noise_frac must be finite and nonnegative, got {}",
                self.noise_frac
            ));
        }
        if !(self.shift_strength >= 0.0 && self.shift_strength.is_finite()) {
            return bad(format!(
                "shift_strength must be finite and nonnegative, got {}",
                self.shift_strength
            ));
        }
        let (lo, hi) = self.lon_range;
        if !(-180.0 <= lo && lo < hi && hi <= 180.0) {
            return bad(format!(
                "longitude range ({lo}, {hi}) is not an interval inside [-180, 180]"
            ));
        }
        let (lo, hi) = self.lat_range;
        if !(-90.0 <= lo && lo < hi && hi <= 90.0) {
            return bad(format!(
                "latitude range ({lo}, {hi}) is not an interval inside [-90, 90]"
            ));
        }
        if !(self.lon_range.0 < self.regime_lon && self.regime_lon < self.lon_range.1) {
            return bad(format!(
                "regime_lon {} lies outside the longitude range, so one regime would be empty",
                self.regime_lon
            ));
        }
        let offsets = [
            self.tau_offset,
            self.wetness_offset,
            self.emissivity_offset,
            self.water_offset,
        ];
        if offsets.iter().any(|v| !v.is_finite()) {
            return bad("regime offsets must be finite".into());
        }
        Ok(())
    }

    pub fn time_steps(&self) -> usize {
        self.days.div_ceil(self.time_stride)
    }
}

/// Smooth random spatial field: a few random plane waves with unit
/// overall standard deviation.
struct Field {
    waves: Vec<(f64, f64, f64)>,
}

impl Field {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..6)
            .map(|_| {
                let k = rng.gen_range(0.05..0.25);
                let dir = rng.gen_range(0.0..2.0 * PI);
                (k * dir.cos(), k * dir.sin(), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        Field { waves }
    }

    fn at(&self, lat: f64, lon: f64) -> f64 {
        let norm = (2.0 / self.waves.len() as f64).sqrt();
        norm * self
            .waves
            .iter()
            .map(|&(a, b, c)| (a * lon + b * lat + c).sin())
            .sum::<f64>()
    }
}

/// Metres; a ridge standing in for the western mountains.
fn elevation(lat: f64, lon: f64) -> f64 {
    2400.0 * (-((lon + 109.0) / 5.0).powi(2)).exp() * (-((lat - 40.0) / 12.0).powi(2)).exp()
        + 150.0 * (1.0 + ((lat - 25.0) / 24.0))
}

struct Day {
    t: f64,
    day: usize,
}

/// Latent temperature of one station for every day, at the given lapse.
fn temperature_series(st: &Station, field: f64, days: usize, rng: &mut ChaCha8Rng) -> Vec<Day> {
    let base = 288.0 - 0.8 * (st.lat - 37.0) - 0.0065 * elevation(st.lat, st.lon) + 2.0 * field;
    let amp = 6.0 + 0.4 * (st.lat - 25.0);
    let weather = Normal::new(0.0, 1.6).expect("valid sigma");
    let mut w = weather.sample(rng) / (1.0 - 0.7f64 * 0.7).sqrt();
    (0..days)
        .map(|day| {
            if day > 0 {
                w = 0.7 * w + weather.sample(rng);
            }
            let season = -amp * (2.0 * PI * (day as f64 + 10.0) / 365.0).cos();
            Day {
                t: base + season + w,
                day,
            }
        })
        .collect()
}

struct Row {
    time: u32,
    state: Vec<f64>,
    energy: EnergyBalanceInputs,
}

struct StationRows {
    rows: Vec<Row>,
}

fn clamp_into(v: f64, (lo, hi): (f64, f64)) -> f64 {
    // keep a margin so that states never sit exactly on a bound
    let m = 0.01 * (hi - lo);
    v.clamp(lo + m, hi - m)
}

fn station_rows(
    cfg: &WorldConfig,
    model: &dyn MechanisticModel,
    st: &Station,
    fields: &[Field; 3],
    seed: u64,
) -> StationRows {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(st.location_id as u64);
    let east = if st.lon > cfg.regime_lon {
        cfg.shift_strength
    } else {
        0.0
    };
    let bounds = model.state_bounds();
    let f0 = fields[0].at(st.lat, st.lon);
    let f1 = fields[1].at(st.lat, st.lon);
    let f2 = fields[2].at(st.lat, st.lon);
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");
    let series = temperature_series(st, f0, cfg.days, &mut rng);
    let mut rows = Vec::new();
    for d in series.iter().step_by(cfg.time_stride) {
        let t = clamp_into(d.t, bounds[0]);
        let phase = 2.0 * PI * (d.day as f64 + 10.0) / 365.0;
        let summer = -phase.cos();
        let state = match cfg.sim {
            SimKind::Pm1 => {
                let wet = 0.14 + cfg.wetness_offset * east + 0.04 * f1 - 0.03 * summer
                    + 0.02 * unit.sample(&mut rng);
                let tau_h = clamp_into(
                    0.15 + cfg.tau_offset * east
                        + 0.03 * f2
                        + 0.04 * summer
                        + 0.01 * unit.sample(&mut rng),
                    bounds[2],
                );
                let tau_v = 1.5 * tau_h + 0.02 * unit.sample(&mut rng);
                vec![
                    t,
                    clamp_into(wet, bounds[1]),
                    tau_h,
                    clamp_into(tau_v, bounds[3]),
                ]
            }
            SimKind::Pm2 => {
                let eps = 0.955
                    + cfg.emissivity_offset * east
                    + 0.008 * f1
                    + 0.003 * unit.sample(&mut rng);
                let water = 1.2
                    + cfg.water_offset * east
                    + 0.04 * (t - 280.0)
                    + 0.3 * f2
                    + 0.2 * unit.sample(&mut rng);
                let dt = 4.0 + 0.1 * (t - 280.0) + 1.5 * unit.sample(&mut rng);
                vec![
                    t,
                    clamp_into(eps, bounds[1]),
                    clamp_into(water, bounds[2]),
                    clamp_into(dt, bounds[3]),
                ]
            }
        };
        let energy = energy_inputs(st, t, d.day, cfg.sim, &state, &mut rng);
        rows.push(Row {
            time: d.day as u32,
            state,
            energy,
        });
    }
    StationRows { rows }
}

/// Fluxes consistent with the surface temperature `t`: the ground heat
/// flux closes the balance up to N(0, 10 W m^-2) noise.
fn energy_inputs(
    st: &Station,
    t: f64,
    day: usize,
    sim: SimKind,
    state: &[f64],
    rng: &mut ChaCha8Rng,
) -> EnergyBalanceInputs {
    let decl = 23.44f64.to_radians() * (2.0 * PI * (day as f64 - 80.0) / 365.0).sin();
    let noon = (st.lat.to_radians() - decl).cos().max(0.05);
    let cloud = rng.gen_range(0.55..1.0);
    let sw_down = 1000.0 * noon * cloud * 0.45;
    let sw_up = 0.2 * sw_down;
    let emissivity = match sim {
        SimKind::Pm2 => state[1],
        SimKind::Pm1 => 0.96,
    };
    let t_air = t - 3.0;
    let lw_down = 0.78 * STEFAN_BOLTZMANN * t_air.powi(4);
    let available =
        sw_down - sw_up + emissivity * lw_down - emissivity * STEFAN_BOLTZMANN * t.powi(4);
    let sensible = 0.35 * available.max(0.0) + 5.0;
    let latent = 0.45 * available.max(0.0) + 10.0;
    let noise = Normal::new(0.0, 10.0).expect("valid sigma").sample(rng);
    let ground = available - sensible - latent + noise;
    EnergyBalanceInputs {
        sw_down,
        sw_up,
        lw_down,
        sensible,
        latent,
        ground,
        emissivity,
    }
}

/// Builds the world; a pure function of `(cfg, seed)`.
pub fn generate_world(cfg: &WorldConfig, seed: u64) -> Result<StDataset> {
    cfg.validate()?;
    let model = cfg.sim.model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stations: Vec<Station> = (0..cfg.stations)
        .map(|i| Station {
            location_id: i as LocationId + 1,
            lat: rng.gen_range(cfg.lat_range.0..=cfg.lat_range.1),
            lon: rng.gen_range(cfg.lon_range.0..=cfg.lon_range.1),
        })
        .collect();
    let fields = [
        Field::new(&mut rng),
        Field::new(&mut rng),
        Field::new(&mut rng),
    ];

    let per_station: Vec<StationRows> = stations
        .par_iter()
        .map(|st| station_rows(cfg, model.as_ref(), st, &fields, seed))
        .collect();

    let k = model.dim();
    let mut clean = Vec::new();
    for rows in &per_station {
        for r in &rows.rows {
            clean.push(model.simulate(&r.state)?);
        }
    }
    let sigma: Vec<f64> = (0..k)
        .map(|b| {
            let (lo, hi) = clean
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                    (lo.min(x[b]), hi.max(x[b]))
                });
            cfg.noise_frac * (hi - lo)
        })
        .collect();

    let mut state_names: Vec<String> = model.state_names().iter().map(|s| s.to_string()).collect();
    state_names.extend(
        EnergyBalanceInputs::FIELD_NAMES
            .iter()
            .map(|f| format!("{ENERGY_PREFIX}{f}")),
    );
    state_names.extend((0..k).map(|b| format!("noise_{b}")));

    let mut cols = Columns::default();
    let mut clean_rows = clean.into_iter();
    for (st, rows) in stations.iter().zip(&per_station) {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_7a7e);
        noise_rng.set_stream(st.location_id as u64);
        for r in &rows.rows {
            let x = clean_rows.next().expect("one simulation per row");
            let noise: Vec<f64> = sigma
                .iter()
                .map(|&s| {
                    if s > 0.0 {
                        s * noise_rng.sample::<f64, _>(rand_distr::StandardNormal)
                    } else {
                        0.0
                    }
                })
                .collect();
            cols.location.push(st.location_id);
            cols.time.push(r.time);
            cols.x.extend(x.iter().zip(&noise).map(|(a, b)| a + b));
            cols.y.push(r.state[0]);
            cols.state.extend_from_slice(&r.state);
            cols.state.extend(r.energy.as_array());
            cols.state.extend(noise);
        }
    }
    let feature_names = (0..k).map(|b| format!("x_{b}")).collect();
    StDataset::new(stations, feature_names, state_names, Some(cfg.sim), cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(sim: SimKind) -> WorldConfig {
        WorldConfig {
            stations: 30,
            days: 60,
            time_stride: 3,
            sim,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = small(SimKind::Pm1);
        let a = generate_world(&cfg, 7).unwrap();
        let b = generate_world(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ground_state_reproduces_observations() {
        for sim in [SimKind::Pm1, SimKind::Pm2] {
            let ds = generate_world(&small(sim), 3).unwrap();
            let model = sim.model();
            let k = model.dim();
            let names = model.state_names();
            let states = ds.sim_states(&names).unwrap();
            let noise_idx: Vec<usize> = (0..k)
                .map(|b| ds.state_index(&format!("noise_{b}")).unwrap())
                .collect();
            let s = ds.state_dim();
            let gs = ds.ground_state().to_vec();
            for (i, st) in states.iter().enumerate() {
                let clean = model.simulate(st).unwrap();
                for b in 0..k {
                    let x = ds.feature_row(i)[b] - gs[i * s + noise_idx[b]];
                    assert!((x - clean[b]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn energy_closes_up_to_noise() {
        let ds = generate_world(&small(SimKind::Pm2), 5).unwrap();
        let e = ds.energy_inputs().unwrap();
        let y = ds.labels();
        let r: Vec<f64> = e.iter().zip(y).map(|(e, &t)| e.residual(t)).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
        assert!(mean.abs() < 2.0 && (sd - 10.0).abs() < 2.0, "{mean} {sd}");
    }

    #[test]
    fn config_errors() {
        let mut c = WorldConfig::default();
        c.stations = 1;
        assert!(generate_world(&c, 0).is_err());
        let mut c = WorldConfig::default();
        c.regime_lon = -150.0;
        assert!(c.validate().is_err());
        let mut c = WorldConfig::default();
        c.noise_frac = f64::NAN;
        assert!(c.validate().is_err());
    }

    #[test]
    fn strided_world_subsamples_daily_world() {
        let mut daily = small(SimKind::Pm1);
        daily.time_stride = 1;
        let a = generate_world(&daily, 2).unwrap();
        let b = generate_world(&small(SimKind::Pm1), 2).unwrap();
        assert_eq!(b.len(), 30 * 20);
        let ya = a.labels().to_vec();
        let yb = b.labels();
        // station 1, day 3
        assert_eq!(yb[1], ya[3]);
    }
}
