//! Training objectives and evaluation metrics.
//!
//! Tape-level losses take predictions as `(n, 1)` vars; targets that are
//! not differentiated (true labels, simulated labels, physical inputs) are
//! plain slices recorded as constants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{EnergyBalanceInputs, STEFAN_BOLTZMANN};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type LocationId = u32;

/// Offset inside the smooth absolute value and the per-location square
/// roots used during training.
pub const SMOOTH_DELTA: f64 = 1e-12;

/// `(prediction, truth)` pairs grouped by location.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerLocationErrors {
    pairs: BTreeMap<LocationId, Vec<(f64, f64)>>,
}

impl PerLocationErrors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(locations: &[LocationId], preds: &[f64], truth: &[f64]) -> Result<Self> {
        if locations.len() != preds.len() || preds.len() != truth.len() {
            return Err(Error::shape(
                "PerLocationErrors",
                &[locations.len(), preds.len()],
                &[truth.len()],
            ));
        }
        let mut out = Self::new();
        for ((&l, &p), &t) in locations.iter().zip(preds).zip(truth) {
            out.push(l, p, t);
        }
        Ok(out)
    }

    pub fn push(&mut self, location: LocationId, prediction: f64, truth: f64) {
        self.pairs
            .entry(location)
            .or_default()
            .push((prediction, truth));
    }

    pub fn locations(&self) -> usize {
        self.pairs.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LocationId, &Vec<(f64, f64)>)> {
        self.pairs.iter()
    }

    /// RMSE per location, in location-id order.
    pub fn location_rmse(&self) -> Vec<(LocationId, f64)> {
        self.pairs
            .iter()
            .map(|(l, v)| (*l, rmse_pairs(v)))
            .collect()
    }

    pub fn pooled_rmse(&self) -> f64 {
        let (sum, n) = self
            .pairs
            .values()
            .flatten()
            .fold((0.0, 0usize), |(s, n), (p, t)| {
                (s + (p - t) * (p - t), n + 1)
            });
        (sum / n.max(1) as f64).sqrt()
    }
}

fn rmse_pairs(v: &[(f64, f64)]) -> f64 {
    (v.iter().map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Rmse,
}

/// Mean absolute deviation of each location's metric from the metric over
/// all pooled pairs.
pub fn fairness_measure(errs: &PerLocationErrors, metric: Metric) -> Result<f64> {
    if errs.locations() == 0 {
        return Err(Error::config("fairness needs at least one location"));
    }
    let Metric::Rmse = metric;
    let global = errs.pooled_rmse();
    let per = errs.location_rmse();
    Ok(per.iter().map(|(_, m)| (m - global).abs()).sum::<f64>() / per.len() as f64)
}

/// Dense group indices for a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Groups {
    pub index: Vec<usize>,
    pub counts: Vec<f64>,
    pub ids: Vec<LocationId>,
}

impl Groups {
    pub fn from_ids(locations: &[LocationId]) -> Self {
        let mut ids: Vec<LocationId> = locations.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let index: Vec<usize> = locations
            .iter()
            .map(|l| ids.binary_search(l).expect("id collected above"))
            .collect();
        let mut counts = vec![0.0; ids.len()];
        index.iter().for_each(|&g| counts[g] += 1.0);
        Groups { index, counts, ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.index.len()
    }
}

fn column<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
    tape.constant(Tensor::new(vec![v.len(), 1], v.to_vec()).expect("column"))
}

fn check_rows(op: &'static str, pred: Var<'_>, n: usize) -> Result<()> {
    let shape = pred.shape();
    if shape != [n, 1] {
        return Err(Error::shape(op, &shape, &[n, 1]));
    }
    Ok(())
}

/// Differentiable fairness of `pred` against `target` over the locations in
/// `groups`: per-location RMSEs, their deviations from the global RMSE under
/// a smooth absolute value, averaged over locations.
///
/// `global` replaces the batch's own pooled RMSE with a fixed value (e.g.
/// one computed over a whole split).
pub fn fairness_surrogate<'t>(
    tape: &'t Tape,
    pred: Var<'t>,
    target: &[f64],
    groups: &Groups,
    global: Option<f64>,
) -> Result<Var<'t>> {
    let n = target.len();
    if groups.rows() != n {
        return Err(Error::shape("fairness_surrogate", &[groups.rows()], &[n]));
    }
    check_rows("fairness_surrogate", pred, n)?;
    let sq = pred.sub(column(tape, target))?.square();
    let per_sum = sq.segment_sum(&groups.index, groups.len())?;
    let counts = tape.constant(Tensor::vector(groups.counts.clone()));
    let per_rmse = per_sum.div(counts)?.add_scalar(SMOOTH_DELTA).sqrt();
    let global = match global {
        Some(g) => tape.scalar(g),
        None => sq.mean().add_scalar(SMOOTH_DELTA).sqrt(),
    };
    let dev = per_rmse.sub(global.reshape(&[1])?)?;
    Ok(dev.smooth_abs(SMOOTH_DELTA).mean())
}

/// Fairness of test predictions measured against simulated labels; true
/// test labels never enter.
pub fn preliminary_fairness_loss<'t>(
    tape: &'t Tape,
    preds_test: Var<'t>,
    sim_labels: &[f64],
    locations: &[LocationId],
    global: Option<f64>,
) -> Result<Var<'t>> {
    if locations.len() != sim_labels.len() {
        return Err(Error::shape(
            "preliminary_fairness_loss",
            &[locations.len()],
            &[sim_labels.len()],
        ));
    }
    fairness_surrogate(
        tape,
        preds_test,
        sim_labels,
        &Groups::from_ids(locations),
        global,
    )
}

/// `-(1/n) sum (y - y_hat)(y_sim - y_hat)`.
pub fn consistency_loss<'t>(
    tape: &'t Tape,
    y: &[f64],
    y_hat: Var<'t>,
    y_sim: &[f64],
) -> Result<Var<'t>> {
    if y.len() != y_sim.len() {
        return Err(Error::shape("consistency_loss", &[y.len()], &[y_sim.len()]));
    }
    check_rows("consistency_loss", y_hat, y.len())?;
    let e = column(tape, y).sub(y_hat)?;
    let e_m = column(tape, y_sim).sub(y_hat)?;
    Ok(e.mul(e_m)?.mean().neg())
}

/// Penalises only the rows whose errors point in opposite directions:
/// `(1/n) sum max(0, -(y - y_hat)(y_sim - y_hat))`. It agrees with
/// [`consistency_loss`] on misaligned rows and is zero on aligned ones, so
/// it is bounded below.
pub fn consistency_hinge_loss<'t>(
    tape: &'t Tape,
    y: &[f64],
    y_hat: Var<'t>,
    y_sim: &[f64],
) -> Result<Var<'t>> {
    if y.len() != y_sim.len() {
        return Err(Error::shape(
            "consistency_hinge_loss",
            &[y.len()],
            &[y_sim.len()],
        ));
    }
    check_rows("consistency_hinge_loss", y_hat, y.len())?;
    let e = column(tape, y).sub(y_hat)?;
    let e_m = column(tape, y_sim).sub(y_hat)?;
    Ok(e.mul(e_m)?.neg().max0().mean())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyForm {
    /// [`consistency_hinge_loss`].
    #[default]
    Hinge,
    /// [`consistency_loss`], unbounded below.
    Literal,
}

impl std::str::FromStr for ConsistencyForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(ConsistencyForm::Hinge),
            "literal" => Ok(ConsistencyForm::Literal),
            other => Err(Error::config(format!(
                "unknown consistency form `{other}` (hinge or literal)"
            ))),
        }
    }
}

pub fn consistency<'t>(
    tape: &'t Tape,
    form: ConsistencyForm,
    y: &[f64],
    y_hat: Var<'t>,
    y_sim: &[f64],
) -> Result<Var<'t>> {
    match form {
        ConsistencyForm::Hinge => consistency_hinge_loss(tape, y, y_hat, y_sim),
        ConsistencyForm::Literal => consistency_loss(tape, y, y_hat, y_sim),
    }
}

pub fn mse_loss<'t>(tape: &'t Tape, y_hat: Var<'t>, y: &[f64]) -> Result<Var<'t>> {
    check_rows("mse_loss", y_hat, y.len())?;
    Ok(y_hat.sub(column(tape, y))?.square().mean())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pm1LossForm {
    /// `max(0, X - eps*y) + max(0, eta*y - X)`: zero exactly on the band
    /// `X/eps <= y <= X/eta`.
    #[default]
    Hinge,
    /// `max(0, X - eps*y) + min(0, X - eta*y)` as printed; the second term
    /// is never positive, so this form can reward violations.
    Literal,
}

impl std::str::FromStr for Pm1LossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(Pm1LossForm::Hinge),
            "literal" => Ok(Pm1LossForm::Literal),
            other => Err(Error::config(format!(
                "unknown PM1 loss form `{other}` (hinge or literal)"
            ))),
        }
    }
}

/// Per-band emissivity-like bounds `(eps, eta)` for one sample from its
/// observation and simulated temperature: with `r = X / y_sim`,
/// `eps = min(1, r)` and `eta = max(0, r)`.
pub fn pm1_bounds(x: &[f64], y_sim: f64) -> (Vec<f64>, Vec<f64>) {
    let r: Vec<f64> = x.iter().map(|v| v / y_sim).collect();
    (
        r.iter().map(|v| v.min(1.0)).collect(),
        r.iter().map(|v| v.max(0.0)).collect(),
    )
}

/// Gray-body constraint; `x`, `eps`, `eta` are `(n, k)` row-major.
pub fn phy_loss_pm1<'t>(
    tape: &'t Tape,
    x: &Tensor,
    y_hat: Var<'t>,
    eps: &Tensor,
    eta: &Tensor,
    form: Pm1LossForm,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 2 || eps.shape() != shape || eta.shape() != shape {
        return Err(Error::shape("phy_loss_pm1", shape, eps.shape()));
    }
    check_rows("phy_loss_pm1", y_hat, shape[0])?;
    let xv = tape.constant(x.clone());
    // y_hat broadcast across the k bands
    let ones = tape.constant(Tensor::new(vec![1, shape[1]], vec![1.0; shape[1]])?);
    let yb = y_hat.matmul(ones)?;
    let upper = xv.sub(tape.constant(eps.clone()).mul(yb)?)?.max0();
    let lower = match form {
        Pm1LossForm::Hinge => tape.constant(eta.clone()).mul(yb)?.sub(xv)?.max0(),
        Pm1LossForm::Literal => xv.sub(tape.constant(eta.clone()).mul(yb)?)?.min0(),
    };
    Ok(upper.add(lower)?.mean())
}

/// Mean absolute surface energy-balance residual at the predicted
/// temperature.
pub fn phy_loss_pm2<'t>(
    tape: &'t Tape,
    y_hat: Var<'t>,
    inputs: &[EnergyBalanceInputs],
) -> Result<Var<'t>> {
    check_rows("phy_loss_pm2", y_hat, inputs.len())?;
    let coef: Vec<f64> = inputs
        .iter()
        .map(|e| -e.emissivity * STEFAN_BOLTZMANN)
        .collect();
    let forcing: Vec<f64> = inputs.iter().map(|e| e.forcing()).collect();
    let residual = y_hat
        .pow(4.0)
        .mul(column(tape, &coef))?
        .add(column(tape, &forcing))?;
    Ok(residual.abs().mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub p: f64,
    pub f: f64,
    pub c: f64,
    pub phy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            p: 1.0,
            f: 1.0,
            c: 1.0,
            phy: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("p", self.p),
            ("f", self.f),
            ("c", self.c),
            ("phy", self.phy),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!(
                    "loss weight `{name}` must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// The four loss terms of one step; absent terms are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts<'t> {
    pub p: Option<Var<'t>>,
    pub f: Option<Var<'t>>,
    pub c: Option<Var<'t>>,
    pub phy: Option<Var<'t>>,
}

/// Values of one step's losses, for logs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_p: f64,
    pub l_f_pre: f64,
    pub l_c: f64,
    pub l_phy: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub n_train: usize,
    pub n_test: usize,
}

/// Weighted sum of the present parts.
pub fn total_loss<'t>(
    tape: &'t Tape,
    parts: &LossParts<'t>,
    weights: &LossWeights,
) -> Result<(Var<'t>, LossReport)> {
    weights.validate()?;
    let mut total = tape.scalar(0.0);
    let mut report = LossReport {
        weights: *weights,
        ..LossReport::default()
    };
    for (part, w, slot) in [
        (parts.p, weights.p, &mut report.l_p),
        (parts.f, weights.f, &mut report.l_f_pre),
        (parts.c, weights.c, &mut report.l_c),
        (parts.phy, weights.phy, &mut report.l_phy),
    ] {
        if let Some(v) = part {
            *slot = v.item();
            if w != 0.0 {
                total = total.add(v.scale(w))?;
            }
        }
    }
    report.total = total.item();
    Ok((total, report))
}

/// Pearson correlation of pooled pairs; `None` when either side has zero
/// variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || n != b.len() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;

    fn two_locations() -> PerLocationErrors {
        let mut e = PerLocationErrors::new();
        e.push(1, 1.0, 0.0);
        e.push(2, 0.0, 3.0);
        e
    }

    #[test]
    fn fairness_hand_case() {
        let f = fairness_measure(&two_locations(), Metric::Rmse).unwrap();
        assert!((f - 1.0).abs() < 1e-12, "{f}");
    }

    #[test]
    fn fairness_parity_and_empty() {
        let mut e = PerLocationErrors::new();
        for l in 0..4 {
            e.push(l, 2.0, 0.0);
            e.push(l, -2.0, 0.0);
        }
        assert_eq!(fairness_measure(&e, Metric::Rmse).unwrap(), 0.0);
        assert!(fairness_measure(&PerLocationErrors::new(), Metric::Rmse).is_err());
    }

    #[test]
    fn preliminary_fairness_matches_hand_case() {
        let tape = Tape::new();
        let pred = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let l = preliminary_fairness_loss(&tape, pred, &[0.0, 3.0], &[1, 2], None).unwrap();
        assert!((l.item() - 1.0).abs() < 1e-9, "{}", l.item());
        let same = preliminary_fairness_loss(&tape, pred, &[1.0, 0.0], &[1, 2], None).unwrap();
        assert!(same.item() < 1e-5);
        assert!(preliminary_fairness_loss(&tape, pred, &[1.0, 0.0], &[1], None).is_err());
    }

    #[test]
    fn consistency_cases() {
        let tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[2, 1]));
        // e = e_M = [1, -2]
        let l = consistency_loss(&tape, &[1.0, -2.0], zero, &[1.0, -2.0]).unwrap();
        assert_eq!(l.item(), -2.5);
        let l = consistency_loss(&tape, &[1.0, 1.0], zero, &[-1.0, 1.0]).unwrap();
        assert_eq!(l.item(), 0.0);
        let y = tape.constant(Tensor::new(vec![2, 1], vec![4.0, 5.0]).unwrap());
        assert_eq!(
            consistency_loss(&tape, &[4.0, 5.0], y, &[9.0, -1.0])
                .unwrap()
                .item(),
            0.0
        );
        assert!(consistency_loss(&tape, &[1.0], zero, &[1.0]).is_err());
    }

    #[test]
    fn consistency_hinge_counts_only_misaligned_rows() {
        let tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[2, 1]));
        let l = consistency_hinge_loss(&tape, &[1.0, -2.0], zero, &[1.0, -2.0]).unwrap();
        assert_eq!(l.item(), 0.0);
        // row 0: e = 1, e_M = -1 -> 1; row 1 aligned
        let l = consistency_hinge_loss(&tape, &[1.0, 1.0], zero, &[-1.0, 1.0]).unwrap();
        assert_eq!(l.item(), 0.5);
        let literal = consistency_loss(
            &tape,
            &[3.0],
            tape.constant(Tensor::zeros(&[1, 1])),
            &[-2.0],
        )
        .unwrap();
        let hinge = consistency_hinge_loss(
            &tape,
            &[3.0],
            tape.constant(Tensor::zeros(&[1, 1])),
            &[-2.0],
        )
        .unwrap();
        assert_eq!(literal.item(), hinge.item());
    }

    #[test]
    fn pm1_hinge_cases() {
        let tape = Tape::new();
        let one = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let y = tape.constant(one(300.0));
        let l = |x: f64, e: f64, n: f64, form| {
            phy_loss_pm1(&tape, &one(x), y, &one(e), &one(n), form)
                .unwrap()
                .item()
        };
        assert_eq!(l(280.0, 1.0, 0.5, Pm1LossForm::Hinge), 0.0);
        assert_eq!(l(310.0, 1.0, 0.5, Pm1LossForm::Hinge), 10.0);
        assert_eq!(l(300.0, 1.0, 0.5, Pm1LossForm::Hinge), 0.0);
        assert_eq!(l(100.0, 1.0, 0.5, Pm1LossForm::Hinge), 50.0);
        assert_eq!(l(100.0, 1.0, 0.5, Pm1LossForm::Literal), -50.0);
        assert_eq!(l(200.0, 1.0, 0.8, Pm1LossForm::Literal), -40.0);
    }

    #[test]
    fn pm1_bounds_from_ratio() {
        let (e, n) = pm1_bounds(&[150.0, 330.0], 300.0);
        assert_eq!(e, vec![0.5, 1.0]);
        assert_eq!(n, vec![0.5, 1.1]);
    }

    #[test]
    fn pm2_energy_cases() {
        let s = STEFAN_BOLTZMANN;
        let e = EnergyBalanceInputs {
            sw_down: s * 300f64.powi(4),
            sw_up: 0.0,
            lw_down: 0.0,
            sensible: 0.0,
            latent: 0.0,
            ground: 0.0,
            emissivity: 1.0,
        };
        let tape = Tape::new();
        let at = |t: f64| {
            phy_loss_pm2(
                &tape,
                tape.constant(Tensor::new(vec![1, 1], vec![t]).unwrap()),
                &[e],
            )
            .unwrap()
            .item()
        };
        assert!(at(300.0).abs() < 1e-9);
        assert!((at(310.0) - 64.3707).abs() < 1e-3, "{}", at(310.0));
    }

    #[test]
    fn total_loss_weights() {
        let tape = Tape::new();
        let parts = LossParts {
            p: Some(tape.scalar(1.0)),
            f: Some(tape.scalar(2.0)),
            c: Some(tape.scalar(3.0)),
            phy: Some(tape.scalar(4.0)),
        };
        let (t, r) = total_loss(&tape, &parts, &LossWeights::default()).unwrap();
        assert_eq!(t.item(), 10.0);
        assert_eq!(r.total, 10.0);
        let base = LossWeights {
            p: 1.0,
            f: 0.0,
            c: 0.0,
            phy: 0.0,
        };
        assert_eq!(total_loss(&tape, &parts, &base).unwrap().0.item(), 1.0);
        let bad = LossWeights { p: -1.0, ..base };
        assert!(total_loss(&tape, &parts, &bad).is_err());
        let zero = LossParts::default();
        assert_eq!(
            total_loss(&tape, &zero, &LossWeights::default())
                .unwrap()
                .0
                .item(),
            0.0
        );
    }

    #[test]
    fn pearson_degenerate() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn surrogate_gradient() {
        let pred = Tensor::new(vec![5, 1], vec![1.0, -0.5, 2.0, 0.3, 1.7]).unwrap();
        let target = [0.2, 0.1, 1.1, -0.4, 0.9];
        let groups = Groups::from_ids(&[3, 3, 7, 9, 7]);
        let err = check_inputs(&[pred], |tape, v| {
            fairness_surrogate(tape, v[0], &target, &groups, None)
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
