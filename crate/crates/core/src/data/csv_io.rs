//! CSV form of datasets: `location_id,lat,lon,time_index,x_0..x_{d-1},y`
//! followed by optional `state_*` ground-state columns. Label-free feature
//! files drop `y` and keep only the `state_energy_*` columns.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Columns, StDataset, Station, TestFeatures, ENERGY_PREFIX};
use crate::error::{Error, Result};
use crate::losses::LocationId;
use crate::sim::EnergyBalanceInputs;

const STATE_PREFIX: &str = "state_";

fn csv_err(path: &Path, row: usize, msg: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        msg: msg.into(),
    }
}

fn io_err(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => csv_err(path, row, format!("{other:?}")),
    }
}

pub fn save_csv(data: &StDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header: Vec<String> = ["location_id", "lat", "lon", "time_index"]
        .map(String::from)
        .to_vec();
    header.extend((0..data.dim()).map(|j| format!("x_{j}")));
    header.push("y".into());
    header.extend(
        data.state_names
            .iter()
            .map(|s| format!("{STATE_PREFIX}{s}")),
    );
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    let stations: BTreeMap<LocationId, &Station> =
        data.stations.iter().map(|s| (s.location_id, s)).collect();
    let y = data.labels();
    let state = data.ground_state();
    let s = data.state_dim();
    for i in 0..data.len() {
        let st = stations[&data.locations()[i]];
        let mut rec = vec![
            st.location_id.to_string(),
            st.lat.to_string(),
            st.lon.to_string(),
            data.times()[i].to_string(),
        ];
        rec.extend(data.feature_row(i).iter().map(f64::to_string));
        rec.push(y[i].to_string());
        rec.extend(state[i * s..(i + 1) * s].iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes what a model may see of `data`: no labels and no ground state
/// except the energy-balance inputs.
pub fn save_features_csv(data: &TestFeatures, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header: Vec<String> = ["location_id", "lat", "lon", "time_index"]
        .map(String::from)
        .to_vec();
    header.extend((0..data.dim()).map(|j| format!("x_{j}")));
    if data.energy.is_some() {
        header.extend(
            EnergyBalanceInputs::FIELD_NAMES
                .iter()
                .map(|f| format!("{STATE_PREFIX}{ENERGY_PREFIX}{f}")),
        );
    }
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    let stations: BTreeMap<LocationId, &Station> =
        data.stations.iter().map(|s| (s.location_id, s)).collect();
    for i in 0..data.len() {
        let st = stations[&data.location[i]];
        let mut rec = vec![
            st.location_id.to_string(),
            st.lat.to_string(),
            st.lon.to_string(),
            data.time[i].to_string(),
        ];
        rec.extend(data.feature_row(i).iter().map(f64::to_string));
        if let Some(e) = &data.energy {
            rec.extend(e[i].as_array().iter().map(f64::to_string));
        }
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

struct Layout {
    x: Vec<usize>,
    y: Option<usize>,
    state: Vec<(String, usize)>,
}

fn layout(path: &Path, header: &csv::StringRecord, need_y: bool) -> Result<Layout> {
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    for col in ["location_id", "lat", "lon", "time_index"] {
        if find(col).is_none() {
            return Err(csv_err(path, 1, format!("missing column `{col}`")));
        }
    }
    let mut x = Vec::new();
    while let Some(j) = find(&format!("x_{}", x.len())) {
        x.push(j);
    }
    if x.is_empty() {
        return Err(csv_err(path, 1, "missing column `x_0`"));
    }
    let y = find("y");
    if need_y && y.is_none() {
        return Err(csv_err(path, 1, "missing column `y`"));
    }
    let state = header
        .iter()
        .enumerate()
        .filter_map(|(j, h)| {
            h.trim()
                .strip_prefix(STATE_PREFIX)
                .map(|n| (n.to_string(), j))
        })
        .collect();
    Ok(Layout { x, y, state })
}

struct Raw {
    stations: Vec<Station>,
    location: Vec<LocationId>,
    time: Vec<u32>,
    x: Vec<f64>,
    y: Vec<f64>,
    state: Vec<f64>,
}

/// Parses every row; `keep_state` selects which state columns to read.
fn read_rows(
    path: &Path,
    need_y: bool,
    keep_state: impl Fn(&str) -> bool,
) -> Result<(Layout, Raw)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    let mut lay = layout(path, &header, need_y)?;
    lay.state.retain(|(n, _)| keep_state(n));
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .expect("checked by layout")
    };
    let (c_id, c_lat, c_lon, c_t) = (
        col("location_id"),
        col("lat"),
        col("lon"),
        col("time_index"),
    );

    let mut raw = Raw {
        stations: Vec::new(),
        location: Vec::new(),
        time: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        state: Vec::new(),
    };
    let mut coords: BTreeMap<LocationId, (f64, f64)> = BTreeMap::new();
    let mut seen: BTreeMap<(LocationId, u32), usize> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let cell = |j: usize, name: &str| -> Result<&str> {
            rec.get(j)
                .map(str::trim)
                .ok_or_else(|| csv_err(path, row, format!("missing value for `{name}`")))
        };
        let num = |j: usize, name: &str| -> Result<f64> {
            let s = cell(j, name)?;
            s.parse::<f64>()
                .map_err(|_| csv_err(path, row, format!("column `{name}`: `{s}` is not a number")))
        };
        let int = |j: usize, name: &str| -> Result<u32> {
            let s = cell(j, name)?;
            s.parse::<u32>().map_err(|_| {
                csv_err(
                    path,
                    row,
                    format!("column `{name}`: `{s}` is not a nonnegative integer"),
                )
            })
        };
        let id = int(c_id, "location_id")?;
        let t = int(c_t, "time_index")?;
        let (lat, lon) = (num(c_lat, "lat")?, num(c_lon, "lon")?);
        match coords.get(&id) {
            Some(&c) if c != (lat, lon) => {
                return Err(csv_err(
                    path,
                    row,
                    format!(
                    "station {id} has coordinates ({lat}, {lon}) but earlier rows give ({}, {})",
                    c.0, c.1
                ),
                ))
            }
            Some(_) => {}
            None => {
                coords.insert(id, (lat, lon));
                raw.stations.push(Station {
                    location_id: id,
                    lat,
                    lon,
                });
            }
        }
        if let Some(first) = seen.insert((id, t), row) {
            return Err(csv_err(
                path,
                row,
                format!(
                    "duplicate (location_id, time_index) = ({id}, {t}), first seen on row {first}"
                ),
            ));
        }
        raw.location.push(id);
        raw.time.push(t);
        for (k, &j) in lay.x.iter().enumerate() {
            raw.x.push(num(j, &format!("x_{k}"))?);
        }
        if let Some(j) = lay.y.filter(|_| need_y) {
            raw.y.push(num(j, "y")?);
        }
        for (name, j) in &lay.state {
            raw.state.push(num(*j, &format!("{STATE_PREFIX}{name}"))?);
        }
    }
    if raw.location.is_empty() {
        return Err(csv_err(path, 1, "no data rows"));
    }
    Ok((lay, raw))
}

/// Row order sorted by (location, time).
fn sorted_order(location: &[LocationId], time: &[u32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..location.len()).collect();
    order.sort_by_key(|&i| (location[i], time[i]));
    order
}

fn permute(v: &[f64], width: usize, order: &[usize]) -> Vec<f64> {
    order
        .iter()
        .flat_map(|&i| v[i * width..(i + 1) * width].iter().copied())
        .collect()
}

/// Loads a labelled dataset. Rows come back sorted by (location, time).
pub fn load_csv(path: &Path) -> Result<StDataset> {
    let (lay, raw) = read_rows(path, true, |_| true)?;
    let (d, s) = (lay.x.len(), lay.state.len());
    let order = sorted_order(&raw.location, &raw.time);
    let cols = Columns {
        location: order.iter().map(|&i| raw.location[i]).collect(),
        time: order.iter().map(|&i| raw.time[i]).collect(),
        x: permute(&raw.x, d, &order),
        y: order.iter().map(|&i| raw.y[i]).collect(),
        state: permute(&raw.state, s, &order),
    };
    StDataset::new(
        raw.stations,
        (0..d).map(|j| format!("x_{j}")).collect(),
        lay.state.into_iter().map(|(n, _)| n).collect(),
        None,
        cols,
    )
    .map_err(|e| csv_err(path, 0, e.to_string()))
}

/// Loads only what a model may see: features, ids and, when present, the
/// energy-balance inputs. A `y` column and other state columns are never
/// parsed.
pub fn load_features_csv(path: &Path) -> Result<TestFeatures> {
    let (lay, raw) = read_rows(path, false, |n| n.starts_with(ENERGY_PREFIX))?;
    let d = lay.x.len();
    let order = sorted_order(&raw.location, &raw.time);
    let names: Vec<&str> = lay.state.iter().map(|(n, _)| n.as_str()).collect();
    let energy = if names.is_empty() {
        None
    } else {
        let idx: Vec<usize> = EnergyBalanceInputs::FIELD_NAMES
            .iter()
            .map(|f| {
                names
                    .iter()
                    .position(|n| *n == format!("{ENERGY_PREFIX}{f}"))
                    .ok_or_else(|| {
                        csv_err(
                            path,
                            1,
                            format!("missing column `{STATE_PREFIX}{ENERGY_PREFIX}{f}`"),
                        )
                    })
            })
            .collect::<Result<_>>()?;
        let s = names.len();
        Some(
            order
                .iter()
                .map(|&i| {
                    let mut a = [0.0; 7];
                    for (k, &j) in idx.iter().enumerate() {
                        a[k] = raw.state[i * s + j];
                    }
                    EnergyBalanceInputs::from_array(a)
                })
                .collect(),
        )
    };
    Ok(TestFeatures {
        stations: raw.stations,
        feature_names: (0..d).map(|j| format!("x_{j}")).collect(),
        location: order.iter().map(|&i| raw.location[i]).collect(),
        time: order.iter().map(|&i| raw.time[i]).collect(),
        x: permute(&raw.x, d, &order),
        energy,
    })
}
