use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::pearson;
use crate::attack::{pgd, transfer_eval, AdversarialBatch, AttackConfig};
use crate::error::{Error, Result};
use crate::nn::{Dataset, MlpModel};
use crate::oracle::LocalOracle;
use crate::zest::DistanceMetric;

/// Transfer success rates between locally held models: `rates[i][j]` is the rate of
/// adversarial examples crafted on model `i` against model `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub epsilon: f64,
    pub model_ids: Vec<String>,
    pub rates: Vec<Vec<f64>>,
}

impl TransferMatrix {
    /// Attacks every model with `cfg` and scores each batch against every model.
    /// Returns the matrix and the per-surrogate batches (in model order).
    pub fn compute(
        models: &[Arc<MlpModel>],
        data: &Dataset,
        cfg: &AttackConfig,
    ) -> Result<(Self, Vec<AdversarialBatch>)> {
        if models.is_empty() {
            return Err(Error::Empty("transfer matrix needs at least one model".into()));
        }
        let batches: Vec<AdversarialBatch> = models
            .iter()
            .map(|m| pgd(m, data, cfg))
            .collect::<Result<_>>()?;
        let oracles: Vec<LocalOracle> = models.iter().map(|m| LocalOracle::new(m.clone())).collect();
        let rates = batches
            .par_iter()
            .map(|b| {
                oracles
                    .iter()
                    .map(|o| transfer_eval(o, b).map(|t| t.success_rate))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Self {
                epsilon: cfg.epsilon,
                model_ids: models.iter().map(|m| m.model_id().to_string()).collect(),
                rates,
            },
            batches,
        ))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.model_ids.len()).map(|i| self.rates[i][i]).collect()
    }

    /// Long format: `epsilon,surrogate,victim,rate`.
    pub fn append_csv_rows(&self, s: &mut String) {
        for (i, src) in self.model_ids.iter().enumerate() {
            for (j, dst) in self.model_ids.iter().enumerate() {
                let _ = writeln!(s, "{},{src},{dst},{}", self.epsilon, self.rates[i][j]);
            }
        }
    }

    pub const CSV_HEADER: &'static str = "epsilon,surrogate,victim,rate";
}

/// Correlation between Zest distance to one victim and the transfer rate onto it, across
/// proxies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub victim_id: String,
    pub metric: DistanceMetric,
    pub n_points: usize,
    pub epsilon: f64,
    /// `None` when either series is constant.
    pub pearson_r: Option<f64>,
    pub samples: usize,
}

impl CorrelationRecord {
    /// Pairs `(distance, rate)` per proxy; the victim's own entry must already be excluded.
    pub fn from_pairs(
        victim_id: &str,
        metric: DistanceMetric,
        n_points: usize,
        epsilon: f64,
        pairs: &[(f64, f64)],
    ) -> Result<Self> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let pearson_r = match pearson(&xs, &ys) {
            Ok(r) => Some(r),
            Err(Error::Undefined(msg)) => {
                log::warn!("{victim_id} {metric} eps={epsilon}: {msg}");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Self {
            victim_id: victim_id.to_string(),
            metric,
            n_points,
            epsilon,
            pearson_r,
            samples: pairs.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "victim_id,metric,n_points,epsilon,pearson_r,samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.victim_id,
            self.metric,
            self.n_points,
            self.epsilon,
            self.pearson_r.map(|r| r.to_string()).unwrap_or_default(),
            self.samples
        )
    }
}
