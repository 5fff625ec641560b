//! Spatio-temporal datasets: stations, rows of features and labels, the
//! simulator ground state behind every row, and CSV ingestion.
//!
//! Labels (and the ground state, which contains them) are read through
//! accessors that count reads, so tests can assert that a training run
//! never looked at a test split's labels. [`TestFeatures`] carries no
//! labels at all.

mod csv_io;
mod split;
mod world;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LocationId;
use crate::sim::{EnergyBalanceInputs, SimKind};
use crate::tensor::Tensor;

pub use csv_io::{load_csv, load_features_csv, save_csv, save_features_csv};
pub use split::{block_of, split, temperature_zones, SplitKind, SplitSpec, Zone};
pub use world::{generate_world, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub location_id: LocationId,
    pub lat: f64,
    pub lon: f64,
}

/// Prefix of the ground-state columns holding energy-balance inputs.
pub const ENERGY_PREFIX: &str = "energy_";

#[derive(Debug, Default)]
struct ReadAudit(AtomicUsize);

#[derive(Clone, Debug)]
pub struct StDataset {
    pub stations: Vec<Station>,
    pub feature_names: Vec<String>,
    /// Ground-state column names without the `state_` prefix.
    pub state_names: Vec<String>,
    pub sim: Option<SimKind>,
    location: Vec<LocationId>,
    time: Vec<u32>,
    x: Vec<f64>,
    y: Vec<f64>,
    state: Vec<f64>,
    label_reads: Arc<ReadAudit>,
}

impl PartialEq for StDataset {
    fn eq(&self, o: &Self) -> bool {
        self.stations == o.stations
            && self.feature_names == o.feature_names
            && self.state_names == o.state_names
            && self.location == o.location
            && self.time == o.time
            && self.x == o.x
            && self.y == o.y
            && self.state == o.state
    }
}

/// Columnar contents of a dataset, for construction.
#[derive(Clone, Debug, Default)]
pub struct Columns {
    pub location: Vec<LocationId>,
    pub time: Vec<u32>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub state: Vec<f64>,
}

impl StDataset {
    pub fn new(
        stations: Vec<Station>,
        feature_names: Vec<String>,
        state_names: Vec<String>,
        sim: Option<SimKind>,
        cols: Columns,
    ) -> Result<Self> {
        let n = cols.location.len();
        let d = feature_names.len();
        let s = state_names.len();
        if d == 0 {
            return Err(Error::config("a dataset needs at least one feature"));
        }
        if cols.time.len() != n
            || cols.y.len() != n
            || cols.x.len() != n * d
            || cols.state.len() != n * s
        {
            return Err(Error::config(format!(
                "column lengths disagree: {n} rows, {} times, {} labels, {} features for d={d}, {} states for s={s}",
                cols.time.len(),
                cols.y.len(),
                cols.x.len(),
                cols.state.len()
            )));
        }
        let mut seen = BTreeMap::new();
        for st in &stations {
            if !(-90.0..=90.0).contains(&st.lat) || !(-180.0..=180.0).contains(&st.lon) {
                return Err(Error::config(format!(
                    "station {} has coordinates out of range ({}, {})",
                    st.location_id, st.lat, st.lon
                )));
            }
            if seen.insert(st.location_id, ()).is_some() {
                return Err(Error::config(format!(
                    "duplicate station id {}",
                    st.location_id
                )));
            }
        }
        if let Some(l) = cols.location.iter().find(|l| !seen.contains_key(l)) {
            return Err(Error::config(format!("row refers to unknown station {l}")));
        }
        Ok(StDataset {
            stations,
            feature_names,
            state_names,
            sim,
            location: cols.location,
            time: cols.time,
            x: cols.x,
            y: cols.y,
            state: cols.state,
            label_reads: Arc::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.location.len()
    }

    pub fn is_empty(&self) -> bool {
        self.location.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_names.len()
    }

    pub fn locations(&self) -> &[LocationId] {
        &self.location
    }

    pub fn times(&self) -> &[u32] {
        &self.time
    }

    /// Row-major `(n, d)` features.
    pub fn features(&self) -> &[f64] {
        &self.x
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.x[i * d..(i + 1) * d]
    }

    pub fn station(&self, id: LocationId) -> Option<&Station> {
        self.stations.iter().find(|s| s.location_id == id)
    }

    /// True labels. Every call is counted, see [`StDataset::label_reads`].
    pub fn labels(&self) -> &[f64] {
        self.label_reads.0.fetch_add(1, Ordering::Relaxed);
        &self.y
    }

    /// Row-major `(n, state_dim)` ground state. Contains the label, so
    /// reads are counted like [`StDataset::labels`].
    pub fn ground_state(&self) -> &[f64] {
        self.label_reads.0.fetch_add(1, Ordering::Relaxed);
        &self.state
    }

    /// Number of label or ground-state reads on this dataset and its
    /// clones so far.
    pub fn label_reads(&self) -> usize {
        self.label_reads.0.load(Ordering::Relaxed)
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_names.iter().position(|n| n == name)
    }

    /// The simulator's reduced state vector of every row (`k` leading
    /// state columns named after the simulator's state names).
    pub fn sim_states(&self, names: &[&str]) -> Result<Vec<Vec<f64>>> {
        let idx = names
            .iter()
            .map(|n| {
                self.state_index(n).ok_or_else(|| {
                    Error::config(format!("dataset has no state column `state_{n}`"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let s = self.state_dim();
        let state = self.ground_state();
        Ok((0..self.len())
            .map(|i| idx.iter().map(|&j| state[i * s + j]).collect())
            .collect())
    }

    /// Per-row energy-balance inputs when the dataset carries them.
    pub fn energy_inputs(&self) -> Option<Vec<EnergyBalanceInputs>> {
        let idx: Vec<usize> = EnergyBalanceInputs::FIELD_NAMES
            .iter()
            .map(|f| self.state_index(&format!("{ENERGY_PREFIX}{f}")))
            .collect::<Option<_>>()?;
        let s = self.state_dim();
        Some(
            (0..self.len())
                .map(|i| {
                    let mut a = [0.0; 7];
                    for (k, &j) in idx.iter().enumerate() {
                        a[k] = self.state[i * s + j];
                    }
                    EnergyBalanceInputs::from_array(a)
                })
                .collect(),
        )
    }

    /// Rows `idx` as a new dataset restricted to the stations they use.
    /// The copy has its own read counter.
    pub fn subset(&self, idx: &[usize]) -> Result<StDataset> {
        let (d, s) = (self.dim(), self.state_dim());
        let mut cols = Columns::default();
        for &i in idx {
            cols.location.push(self.location[i]);
            cols.time.push(self.time[i]);
            cols.x.extend_from_slice(&self.x[i * d..(i + 1) * d]);
            cols.y.push(self.y[i]);
            cols.state
                .extend_from_slice(&self.state[i * s..(i + 1) * s]);
        }
        let used: std::collections::BTreeSet<_> = cols.location.iter().copied().collect();
        let stations = self
            .stations
            .iter()
            .filter(|s| used.contains(&s.location_id))
            .cloned()
            .collect();
        StDataset::new(
            stations,
            self.feature_names.clone(),
            self.state_names.clone(),
            self.sim,
            cols,
        )
    }

    /// Everything a model may see of a split it is not trained on.
    pub fn test_features(&self) -> TestFeatures {
        TestFeatures {
            stations: self.stations.clone(),
            feature_names: self.feature_names.clone(),
            location: self.location.clone(),
            time: self.time.clone(),
            x: self.x.clone(),
            energy: self.energy_inputs(),
        }
    }

    /// Station-mean labels, in station order.
    pub fn station_mean_labels(&self) -> BTreeMap<LocationId, f64> {
        mean_by_location(&self.location, self.labels())
    }
}

pub(crate) fn mean_by_location(location: &[LocationId], v: &[f64]) -> BTreeMap<LocationId, f64> {
    let mut acc: BTreeMap<LocationId, (f64, usize)> = BTreeMap::new();
    for (&l, &y) in location.iter().zip(v) {
        let e = acc.entry(l).or_default();
        e.0 += y;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(l, (s, n))| (l, s / n as f64))
        .collect()
}

/// Label-free view of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFeatures {
    pub stations: Vec<Station>,
    pub feature_names: Vec<String>,
    pub location: Vec<LocationId>,
    pub time: Vec<u32>,
    pub x: Vec<f64>,
    pub energy: Option<Vec<EnergyBalanceInputs>>,
}

impl TestFeatures {
    pub fn len(&self) -> usize {
        self.location.len()
    }

    pub fn is_empty(&self) -> bool {
        self.location.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.x[i * d..(i + 1) * d]
    }
}

/// Windows of the `w` most recent rows of the same location ending at each
/// row, oldest first, as a `(n, w, d)` tensor. Rows must be grouped by
/// location and sorted by time within a location; the earliest row of a
/// location is repeated to fill windows that would reach before it.
pub fn windows(location: &[LocationId], x: &[f64], d: usize, w: usize) -> Result<Tensor> {
    if w == 0 {
        return Err(Error::config("window length must be at least 1"));
    }
    let n = location.len();
    let mut out = Vec::with_capacity(n * w * d);
    let mut start = 0;
    for i in 0..n {
        if i > 0 && location[i] != location[i - 1] {
            start = i;
        }
        for k in 0..w {
            let back = w - 1 - k;
            let j = i.saturating_sub(back).max(start);
            out.extend_from_slice(&x[j * d..(j + 1) * d]);
        }
    }
    Tensor::new(vec![n, w, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> StDataset {
        let stations = vec![
            Station {
                location_id: 1,
                lat: 30.0,
                lon: -110.0,
            },
            Station {
                location_id: 2,
                lat: 40.0,
                lon: -80.0,
            },
        ];
        let cols = Columns {
            location: vec![1, 1, 2],
            time: vec![0, 1, 0],
            x: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            y: vec![280.0, 281.0, 290.0],
            state: vec![280.0, 0.1, 281.0, 0.2, 290.0, 0.3],
        };
        StDataset::new(
            stations,
            vec!["x_0".into(), "x_1".into()],
            vec!["temperature".into(), "wetness".into()],
            None,
            cols,
        )
        .unwrap()
    }

    #[test]
    fn label_reads_are_counted() {
        let ds = tiny();
        assert_eq!(ds.label_reads(), 0);
        let _ = ds.test_features();
        let _ = ds.features();
        assert_eq!(ds.label_reads(), 0);
        let _ = ds.labels();
        let _ = ds.sim_states(&["temperature"]).unwrap();
        assert_eq!(ds.label_reads(), 2);
    }

    #[test]
    fn rejects_unknown_station_and_bad_lengths() {
        let ds = tiny();
        let mut cols = Columns {
            location: vec![9],
            time: vec![0],
            x: vec![0.0, 0.0],
            y: vec![1.0],
            state: vec![1.0, 1.0],
        };
        let mk = |c: Columns| {
            StDataset::new(
                ds.stations.clone(),
                ds.feature_names.clone(),
                ds.state_names.clone(),
                None,
                c,
            )
        };
        assert!(mk(cols.clone()).is_err());
        cols.location = vec![1];
        cols.x.pop();
        assert!(mk(cols).is_err());
    }

    #[test]
    fn windows_pad_with_earliest_row() {
        let t = windows(&[1, 1, 1, 2], &[1.0, 2.0, 3.0, 9.0], 1, 3).unwrap();
        assert_eq!(t.shape(), &[4, 3, 1]);
        assert_eq!(
            t.data(),
            &[1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 2.0, 3.0, 9.0, 9.0, 9.0]
        );
        assert!(windows(&[1], &[1.0], 1, 0).is_err());
    }

    #[test]
    fn subset_keeps_used_stations() {
        let ds = tiny();
        let s = ds.subset(&[2]).unwrap();
        assert_eq!(s.stations.len(), 1);
        assert_eq!(s.feature_row(0), &[5.0, 6.0]);
    }
}
