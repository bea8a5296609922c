//! Prediction-quality metrics: RMSPE, interval coverage and interval length.

use std::collections::BTreeMap;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{DncError, Result};

/// Root mean squared prediction error of one outcome.
pub fn rmspe(truth: ArrayView1<f64>, pred: ArrayView1<f64>) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(DncError::Shape(format!(
            "truth has {} values, prediction has {}",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(DncError::EmptyData);
    }
    let sq: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    Ok((sq / truth.len() as f64).sqrt())
}

/// RMSPE of every column, `n x J` inputs.
pub fn rmspe_per_outcome(truth: ArrayView2<f64>, pred: ArrayView2<f64>) -> Result<Vec<f64>> {
    if truth.dim() != pred.dim() {
        return Err(DncError::Shape(format!(
            "truth is {:?}, prediction is {:?}",
            truth.dim(),
            pred.dim()
        )));
    }
    truth
        .columns()
        .into_iter()
        .zip(pred.columns())
        .map(|(t, p)| rmspe(t, p))
        .collect()
}

/// Fraction of truths inside `[lower, upper]` and the mean interval width.
pub fn coverage_and_length(
    truth: ArrayView1<f64>,
    lower: ArrayView1<f64>,
    upper: ArrayView1<f64>,
) -> Result<(f64, f64)> {
    let n = truth.len();
    if lower.len() != n || upper.len() != n {
        return Err(DncError::Shape(format!(
            "truth has {n} values, bounds have {} and {}",
            lower.len(),
            upper.len()
        )));
    }
    if n == 0 {
        return Err(DncError::EmptyData);
    }
    if let Some(i) = (0..n).find(|&i| !(lower[i] <= upper[i])) {
        return Err(DncError::InvalidParameter(format!(
            "interval {i} is crossed: lower {} > upper {}",
            lower[i], upper[i]
        )));
    }
    let covered = (0..n)
        .filter(|&i| lower[i] <= truth[i] && truth[i] <= upper[i])
        .count();
    let length: f64 = (0..n).map(|i| upper[i] - lower[i]).sum::<f64>() / n as f64;
    Ok((covered as f64 / n as f64, length))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMetrics {
    pub rmspe: f64,
    pub coverage: f64,
    pub length: f64,
}

/// Metrics keyed by 1-based outcome index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_test: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_seconds: Option<f64>,
    pub outcomes: BTreeMap<String, OutcomeMetrics>,
}

impl MetricsReport {
    /// Builds the report from `n x J` truths, point predictions and bounds.
    pub fn evaluate(
        truth: ArrayView2<f64>,
        pred: ArrayView2<f64>,
        lower: ArrayView2<f64>,
        upper: ArrayView2<f64>,
    ) -> Result<Self> {
        if [pred.dim(), lower.dim(), upper.dim()]
            .iter()
            .any(|&d| d != truth.dim())
        {
            return Err(DncError::Shape(format!(
                "truth is {:?}; predictions {:?}, lower {:?}, upper {:?}",
                truth.dim(),
                pred.dim(),
                lower.dim(),
                upper.dim()
            )));
        }
        let mut outcomes = BTreeMap::new();
        for j in 0..truth.ncols() {
            let rmspe = rmspe(truth.column(j), pred.column(j))?;
            let (coverage, length) =
                coverage_and_length(truth.column(j), lower.column(j), upper.column(j))?;
            outcomes.insert(
                (j + 1).to_string(),
                OutcomeMetrics {
                    rmspe,
                    coverage,
                    length,
                },
            );
        }
        Ok(Self {
            n_test: truth.nrows(),
            fit_seconds: None,
            outcomes,
        })
    }

    pub fn outcome(&self, j: usize) -> Option<&OutcomeMetrics> {
        self.outcomes.get(&(j + 1).to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn rmspe_examples() {
        let t = array![0.0, 2.0];
        assert_eq!(rmspe(t.view(), t.view()).unwrap(), 0.0);
        assert_eq!(rmspe(array![0.0, 0.0].view(), array![1.0, 1.0].view()).unwrap(), 1.0);
        let r = rmspe(t.view(), array![1.0, 0.0].view()).unwrap();
        assert!((r - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((r - 1.5811).abs() < 1e-4);
        assert!(rmspe(t.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn coverage_examples() {
        let truth = array![0.0, 10.0];
        let (c, l) = coverage_and_length(
            truth.view(),
            array![-1.0, 0.0].view(),
            array![1.0, 1.0].view(),
        )
        .unwrap();
        assert_eq!((c, l), (0.5, 1.5));

        let (c, _) = coverage_and_length(
            truth.view(),
            array![-1e300, -1e300].view(),
            array![1e300, 1e300].view(),
        )
        .unwrap();
        assert_eq!(c, 1.0);

        let (c, l) = coverage_and_length(truth.view(), truth.view(), truth.view()).unwrap();
        assert_eq!((c, l), (1.0, 0.0));

        assert!(coverage_and_length(
            truth.view(),
            array![1.0, 0.0].view(),
            array![0.0, 1.0].view()
        )
        .is_err());
    }

    #[test]
    fn report_is_keyed_by_outcome() {
        let truth = array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]];
        let lower = truth.mapv(|v| v - 1.0);
        let upper = truth.mapv(|v| v + 1.0);
        let r = MetricsReport::evaluate(truth.view(), truth.view(), lower.view(), upper.view())
            .unwrap();
        assert_eq!(r.n_test, 3);
        assert_eq!(r.outcome(1).unwrap().rmspe, 0.0);
        assert_eq!(r.outcome(1).unwrap().coverage, 1.0);
        assert_eq!(r.outcome(0).unwrap().length, 2.0);
    }

    proptest! {
        #[test]
        fn rmspe_is_absolutely_homogeneous(
            pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40),
            c in -10.0f64..10.0,
        ) {
            let t: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let base = rmspe(ArrayView1::from(&t), ArrayView1::from(&p)).unwrap();
            let ct: Vec<f64> = t.iter().map(|v| c * v).collect();
            let cp: Vec<f64> = p.iter().map(|v| c * v).collect();
            let scaled = rmspe(ArrayView1::from(&ct), ArrayView1::from(&cp)).unwrap();
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-9 * (1.0 + scaled));

            let mut rt = t.clone();
            let mut rp = p.clone();
            rt.reverse();
            rp.reverse();
            let perm = rmspe(ArrayView1::from(&rt), ArrayView1::from(&rp)).unwrap();
            prop_assert!((perm - base).abs() <= 1e-12 * (1.0 + base));
        }
    }
}
