use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{fairness_measure, pearson, LocationId, Metric, PerLocationErrors};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationMetric {
    pub location_id: LocationId,
    pub rmse: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    /// Pearson r of pooled pairs; 0 when undefined, see `pearson_defined`.
    pub pearson: f64,
    pub pearson_defined: bool,
    pub fairness: f64,
    pub n: usize,
    pub per_location: Vec<LocationMetric>,
    pub warnings: Vec<String>,
}

/// RMSE, Pearson r and location fairness of `preds` against `truth`.
pub fn compute_metrics(locations: &[LocationId], preds: &[f64], truth: &[f64]) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::config("cannot evaluate on an empty set"));
    }
    let errs = PerLocationErrors::from_rows(locations, preds, truth)?;
    let mut warnings = Vec::new();
    if errs.locations() == 1 {
        warnings.push("only one location: fairness is 0 by definition".to_string());
    }
    let r = pearson(preds, truth);
    if r.is_none() {
        warnings.push(
            "zero variance in predictions or labels: Pearson r undefined, reported as 0"
                .to_string(),
        );
    }
    let counts: std::collections::BTreeMap<LocationId, usize> =
        errs.iter().map(|(l, v)| (*l, v.len())).collect();
    Ok(Metrics {
        rmse: errs.pooled_rmse(),
        pearson: r.unwrap_or(0.0),
        pearson_defined: r.is_some(),
        fairness: fairness_measure(&errs, Metric::Rmse)?,
        n: preds.len(),
        per_location: errs
            .location_rmse()
            .into_iter()
            .map(|(location_id, rmse)| LocationMetric {
                location_id,
                rmse,
                n: counts[&location_id],
            })
            .collect(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_model() {
        let m =
            compute_metrics(&[1, 1, 2], &[280.0, 281.0, 290.0], &[280.0, 281.0, 290.0]).unwrap();
        assert_eq!((m.rmse, m.pearson, m.fairness), (0.0, 1.0, 0.0));
        assert!(m.pearson_defined);
    }

    #[test]
    fn constant_model_flags_pearson() {
        let m = compute_metrics(&[1, 2], &[5.0, 5.0], &[4.0, 6.0]).unwrap();
        assert!(!m.pearson_defined);
        assert_eq!(m.pearson, 0.0);
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn two_location_hand_case() {
        // abs errors {1, 3}: global sqrt(5), fairness 1
        let m = compute_metrics(&[1, 2], &[1.0, 3.0], &[0.0, 0.0]).unwrap();
        assert!((m.fairness - 1.0).abs() < 1e-12);
        assert!((m.rmse - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_location_is_zero_with_warning() {
        let m = compute_metrics(&[7, 7], &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(m.fairness, 0.0);
        assert!(m.warnings.iter().any(|w| w.contains("one location")));
    }
}
