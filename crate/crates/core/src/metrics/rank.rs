//! Min-max normalized rank aggregation across models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

impl Orientation {
    /// Orientation of a well-known metric name, case-insensitive.
    pub fn for_metric(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "dsc" | "dice" | "vs" | "sensitivity" | "sens" | "ppv" => Some(Orientation::HigherBetter),
            "hd" | "fp" | "fp_per_case" | "fps" => Some(Orientation::LowerBetter),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricColumn {
    pub name: String,
    pub orientation: Orientation,
    /// One value per model; `None` is undefined.
    pub values: Vec<Option<f64>>,
}

impl MetricColumn {
    pub fn new(name: &str, orientation: Orientation, values: &[f64]) -> Self {
        MetricColumn {
            name: name.to_string(),
            orientation,
            values: values.iter().map(|&v| Some(v)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub models: Vec<String>,
    pub metrics: Vec<MetricColumn>,
    /// `normalized[m][k]`: score of model `k` on metric `m`, 0 best, 1 worst.
    pub normalized: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

impl RankTable {
    /// Index of the lowest final score; the first model wins ties.
    pub fn best(&self) -> usize {
        let mut b = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s < self.scores[b] {
                b = i;
            }
        }
        b
    }
}

/// Per metric, `(v - best) / (worst - best)` so the best model scores 0 and
/// the worst 1 (all 0 when every value is equal); the final score is the mean
/// over metrics. Undefined values score 1.
pub fn rank_models(models: &[String], metrics: &[MetricColumn]) -> Result<RankTable> {
    if models.len() < 2 {
        return Err(Error::Invalid("ranking needs at least two models".into()));
    }
    if metrics.is_empty() {
        return Err(Error::Invalid("ranking needs at least one metric".into()));
    }
    let mut normalized = Vec::with_capacity(metrics.len());
    for col in metrics {
        if col.values.len() != models.len() {
            return Err(Error::Shape(format!(
                "metric {} has {} values for {} models",
                col.name,
                col.values.len(),
                models.len()
            )));
        }
        let defined: Vec<f64> = col.values.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::Invalid(format!("metric {} has no defined values", col.name)));
        }
        if defined.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("metric {} has non-finite values", col.name)));
        }
        let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (best, worst) = match col.orientation {
            Orientation::HigherBetter => (hi, lo),
            Orientation::LowerBetter => (lo, hi),
        };
        let row = col
            .values
            .iter()
            .map(|v| match v {
                None => 1.0,
                Some(_) if worst == best => 0.0,
                Some(v) => (v - best) / (worst - best),
            })
            .collect();
        normalized.push(row);
    }
    let scores = (0..models.len())
        .map(|k| normalized.iter().map(|r: &Vec<f64>| r[k]).sum::<f64>() / metrics.len() as f64)
        .collect();
    Ok(RankTable {
        models: models.to_vec(),
        metrics: metrics.to_vec(),
        normalized,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Orientation::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("m{i}")).collect()
    }

    #[test]
    fn identical_columns_score_zero() {
        let t = rank_models(&names(3), &[MetricColumn::new("dsc", HigherBetter, &[0.5; 3])]).unwrap();
        assert_eq!(t.scores, vec![0.0; 3]);
    }

    #[test]
    fn undefined_scores_worst() {
        let col = MetricColumn {
            name: "hd".into(),
            orientation: LowerBetter,
            values: vec![Some(1.0), None, Some(3.0)],
        };
        let t = rank_models(&names(3), &[col]).unwrap();
        assert_eq!(t.scores, vec![0.0, 1.0, 1.0]);
        let empty = MetricColumn {
            name: "hd".into(),
            orientation: LowerBetter,
            values: vec![None, None],
        };
        assert!(rank_models(&names(2), &[empty]).is_err());
    }

    #[test]
    fn rejects_single_model() {
        assert!(rank_models(&names(1), &[MetricColumn::new("dsc", HigherBetter, &[1.0])]).is_err());
    }

    proptest! {
        #[test]
        fn affine_rescale_invariant(vals in proptest::collection::vec(-100.0f64..100.0, 2..8), a in 0.01f64..50.0, b in -100.0f64..100.0) {
            let m = names(vals.len());
            let t1 = rank_models(&m, &[MetricColumn::new("x", HigherBetter, &vals)]).unwrap();
            let scaled: Vec<f64> = vals.iter().map(|v| a * v + b).collect();
            let t2 = rank_models(&m, &[MetricColumn::new("x", HigherBetter, &scaled)]).unwrap();
            for (s1, s2) in t1.scores.iter().zip(&t2.scores) {
                prop_assert!((s1 - s2).abs() < 1e-9);
            }
        }

        #[test]
        fn scores_in_unit_interval(vals in proptest::collection::vec(-10.0f64..10.0, 2..8)) {
            let t = rank_models(&names(vals.len()), &[MetricColumn::new("hd", LowerBetter, &vals)]).unwrap();
            prop_assert!(t.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }
}
