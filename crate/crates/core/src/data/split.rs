//! Train/test partitions of a dataset.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StDataset;
use crate::error::{Error, Result};
use crate::losses::LocationId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Hot,
    Warm,
    Cold,
}

impl std::str::FromStr for Zone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hot" => Ok(Zone::Hot),
            "warm" => Ok(Zone::Warm),
            "cold" => Ok(Zone::Cold),
            other => Err(Error::config(format!(
                "unknown zone `{other}` (hot, warm or cold)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitSpec {
    /// West of `threshold_lon` trains, east tests.
    GeoRegion {
        #[serde(default = "default_threshold")]
        threshold_lon: f64,
    },
    /// Stations binned into terciles of their mean temperature.
    TemperatureZone {
        #[serde(default = "default_train_zone")]
        train: Zone,
        #[serde(default = "default_test_zone")]
        test: Zone,
    },
    /// Stations grouped into `block_deg` lat/lon blocks; whole blocks go
    /// to the test side in seeded random order until `test_fraction` of
    /// the stations are there.
    RandomGroups {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_block")]
        block_deg: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Times before `cut_time` train, the rest test. Without a cut the
    /// first two thirds of the time span train.
    Temporal {
        #[serde(default)]
        cut_time: Option<u32>,
    },
}

fn default_threshold() -> f64 {
    -100.0
}
fn default_train_zone() -> Zone {
    Zone::Hot
}
fn default_test_zone() -> Zone {
    Zone::Cold
}
fn default_block() -> f64 {
    6.0
}
fn default_test_fraction() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    GeoRegion,
    TemperatureZone,
    RandomGroups,
    Temporal,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::GeoRegion => "geo-region",
            SplitKind::TemperatureZone => "temperature-zone",
            SplitKind::RandomGroups => "random-groups",
            SplitKind::Temporal => "temporal",
        }
    }

    pub fn default_spec(self) -> SplitSpec {
        match self {
            SplitKind::GeoRegion => SplitSpec::GeoRegion {
                threshold_lon: default_threshold(),
            },
            SplitKind::TemperatureZone => SplitSpec::TemperatureZone {
                train: Zone::Hot,
                test: Zone::Cold,
            },
            SplitKind::RandomGroups => SplitSpec::RandomGroups {
                seed: 0,
                block_deg: default_block(),
                test_fraction: default_test_fraction(),
            },
            SplitKind::Temporal => SplitSpec::Temporal { cut_time: None },
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "geo-region" => SplitKind::GeoRegion,
            "temperature-zone" => SplitKind::TemperatureZone,
            "random-groups" => SplitKind::RandomGroups,
            "temporal" => SplitKind::Temporal,
            _ => {
                return Err(Error::config(format!(
                    "unknown split kind `{s}` (expected geo-region, temperature-zone, random-groups or temporal)"
                )))
            }
        })
    }
}

impl SplitSpec {
    pub fn kind(&self) -> SplitKind {
        match self {
            SplitSpec::GeoRegion { .. } => SplitKind::GeoRegion,
            SplitSpec::TemperatureZone { .. } => SplitKind::TemperatureZone,
            SplitSpec::RandomGroups { .. } => SplitKind::RandomGroups,
            SplitSpec::Temporal { .. } => SplitKind::Temporal,
        }
    }
}

/// Temperature zone of every station: terciles of the station-mean label.
pub fn temperature_zones(data: &StDataset) -> BTreeMap<LocationId, Zone> {
    let means = data.station_mean_labels();
    let mut order: Vec<(LocationId, f64)> = means.into_iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = order.len();
    order
        .iter()
        .enumerate()
        .map(|(rank, &(id, _))| {
            let zone = match rank * 3 / n.max(1) {
                0 => Zone::Hot,
                1 => Zone::Warm,
                _ => Zone::Cold,
            };
            (id, zone)
        })
        .collect()
}

/// Random group (block) of a station for a block size in degrees.
pub fn block_of(lat: f64, lon: f64, block_deg: f64) -> (i64, i64) {
    (
        (lat / block_deg).floor() as i64,
        (lon / block_deg).floor() as i64,
    )
}

fn test_stations(
    data: &StDataset,
    spec: &SplitSpec,
) -> Result<(BTreeSet<LocationId>, BTreeSet<LocationId>)> {
    let all = || data.stations.iter().map(|s| s.location_id);
    Ok(match *spec {
        SplitSpec::GeoRegion { threshold_lon } => {
            if !threshold_lon.is_finite() {
                return Err(Error::config("threshold longitude must be finite"));
            }
            let (west, east): (Vec<_>, Vec<_>) =
                data.stations.iter().partition(|s| s.lon < threshold_lon);
            (
                west.iter().map(|s| s.location_id).collect(),
                east.iter().map(|s| s.location_id).collect(),
            )
        }
        SplitSpec::TemperatureZone { train, test } => {
            if train == test {
                return Err(Error::config(
                    "temperature-zone split needs two different zones",
                ));
            }
            let zones = temperature_zones(data);
            let pick = |z| {
                zones
                    .iter()
                    .filter(|(_, &v)| v == z)
                    .map(|(&id, _)| id)
                    .collect()
            };
            (pick(train), pick(test))
        }
        SplitSpec::RandomGroups {
            seed,
            block_deg,
            test_fraction,
        } => {
            if !(block_deg > 0.0 && block_deg.is_finite()) {
                return Err(Error::config(format!(
                    "block size must be positive, got {block_deg}"
                )));
            }
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(Error::config(format!(
                    "test fraction must lie in (0, 1), got {test_fraction}"
                )));
            }
            let mut blocks: BTreeMap<(i64, i64), Vec<LocationId>> = BTreeMap::new();
            for s in &data.stations {
                blocks
                    .entry(block_of(s.lat, s.lon, block_deg))
                    .or_default()
                    .push(s.location_id);
            }
            let mut order: Vec<Vec<LocationId>> = blocks.into_values().collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let target = (test_fraction * data.stations.len() as f64).round() as usize;
            let mut test = BTreeSet::new();
            for b in order {
                if test.len() >= target {
                    break;
                }
                test.extend(b);
            }
            (all().filter(|id| !test.contains(id)).collect(), test)
        }
        SplitSpec::Temporal { .. } => (all().collect(), all().collect()),
    })
}

/// Splits `data` into `(train, test)`. Spatial kinds partition the
/// stations; the temporal kind partitions time at every station.
pub fn split(data: &StDataset, spec: &SplitSpec) -> Result<(StDataset, StDataset)> {
    let (train_st, test_st) = test_stations(data, spec)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let times = data.times();
    let cut = match *spec {
        SplitSpec::Temporal { cut_time } => {
            let (lo, hi) = times
                .iter()
                .fold((u32::MAX, 0), |(lo, hi), &t| (lo.min(t), hi.max(t)));
            Some(cut_time.unwrap_or(lo + ((hi - lo + 1) as u64 * 2 / 3) as u32))
        }
        _ => None,
    };
    for (i, l) in data.locations().iter().enumerate() {
        match cut {
            Some(c) => {
                if times[i] < c {
                    train.push(i)
                } else {
                    test.push(i)
                }
            }
            None => {
                if train_st.contains(l) {
                    train.push(i)
                } else if test_st.contains(l) {
                    test.push(i)
                }
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::config(format!(
            "{} split leaves the {} side empty",
            spec.kind().as_str(),
            if train.is_empty() { "train" } else { "test" }
        )));
    }
    Ok((data.subset(&train)?, data.subset(&test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_world, WorldConfig};

    fn world() -> StDataset {
        let cfg = WorldConfig {
            stations: 40,
            days: 90,
            time_stride: 3,
            ..WorldConfig::default()
        };
        generate_world(&cfg, 1).unwrap()
    }

    fn ids(d: &StDataset) -> BTreeSet<LocationId> {
        d.locations().iter().copied().collect()
    }

    #[test]
    fn geo_region_is_disjoint_and_covers() {
        let d = world();
        let mut lons: Vec<f64> = d.stations.iter().map(|s| s.lon).collect();
        lons.sort_by(f64::total_cmp);
        let median = lons[lons.len() / 2];
        let (tr, te) = split(
            &d,
            &SplitSpec::GeoRegion {
                threshold_lon: median,
            },
        )
        .unwrap();
        assert!(ids(&tr).is_disjoint(&ids(&te)));
        assert_eq!(ids(&tr).len() + ids(&te).len(), 40);
        assert!(tr.stations.iter().all(|s| s.lon < median));
        assert!(te.stations.iter().all(|s| s.lon >= median));
    }

    #[test]
    fn hot_train_is_warmer_than_cold_test() {
        let d = world();
        let (tr, te) = split(&d, &SplitKind::TemperatureZone.default_spec()).unwrap();
        let hot = tr.station_mean_labels();
        let cold = te.station_mean_labels();
        let min_hot = hot.values().copied().fold(f64::INFINITY, f64::min);
        let max_cold = cold.values().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(min_hot > max_cold);
        assert!(ids(&tr).is_disjoint(&ids(&te)));
    }

    #[test]
    fn random_groups_keep_blocks_whole() {
        let d = world();
        let spec = SplitSpec::RandomGroups {
            seed: 4,
            block_deg: 6.0,
            test_fraction: 0.5,
        };
        let (tr, te) = split(&d, &spec).unwrap();
        let blocks = |ds: &StDataset| -> BTreeSet<(i64, i64)> {
            ds.stations
                .iter()
                .map(|s| block_of(s.lat, s.lon, 6.0))
                .collect()
        };
        assert!(blocks(&tr).is_disjoint(&blocks(&te)));
        assert_eq!(ids(&tr).len() + ids(&te).len(), 40);
        assert_eq!(split(&d, &spec).unwrap().1, te);
    }

    #[test]
    fn temporal_split_separates_times() {
        let d = world();
        let (tr, te) = split(&d, &SplitSpec::Temporal { cut_time: None }).unwrap();
        let a: BTreeSet<u32> = tr.times().iter().copied().collect();
        let b: BTreeSet<u32> = te.times().iter().copied().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(ids(&tr), ids(&te));
        assert_eq!(*a.iter().max().unwrap() + 3, *b.iter().min().unwrap());
    }

    #[test]
    fn empty_side_is_an_error() {
        let d = world();
        assert!(split(
            &d,
            &SplitSpec::GeoRegion {
                threshold_lon: -170.0
            }
        )
        .is_err());
        assert!(split(&d, &SplitSpec::Temporal { cut_time: Some(0) }).is_err());
    }

    #[test]
    fn spec_json_shape() {
        let s: SplitSpec = serde_json::from_str(r#"{"kind":"random-groups","seed":3}"#).unwrap();
        assert_eq!(
            s,
            SplitSpec::RandomGroups {
                seed: 3,
                block_deg: 6.0,
                test_fraction: 0.5
            }
        );
        let g: SplitSpec = serde_json::from_str(r#"{"kind":"geo-region"}"#).unwrap();
        assert_eq!(g.kind(), SplitKind::GeoRegion);
    }
}
