use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{MlpModel, ParamGradients};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};

/// Minibatch SGD with momentum. Initialisation and the per-epoch shuffle order both derive
/// from `rng_seed`, so training is bit-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Heavy-ball momentum coefficient in `[0, 1)`.
    pub momentum: f64,
    pub rng_seed: u64,
    /// Hidden layer widths; empty means a linear softmax classifier.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            rng_seed: 0,
            hidden: vec![32],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub final_loss: f64,
    pub warnings: Vec<String>,
}

/// Trains a ReLU MLP with cross-entropy loss. The returned model records its training
/// accuracy. Data with a single class still trains, but a warning is reported.
pub fn train(data: &Dataset, cfg: &TrainConfig, model_id: &str) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let mut warnings = Vec::new();
    if data.distinct_labels() < 2 {
        let msg = "training data contains a single class".to_string();
        log::warn!("{model_id}: {msg}");
        warnings.push(msg);
    }

    let mut init_rng = rng(derive_seed(cfg.rng_seed, &["init"]));
    let mut model = MlpModel::init(
        model_id,
        data.dim(),
        &cfg.hidden,
        data.class_count(),
        &mut init_rng,
    )?;
    let mut shuffle_rng = rng(derive_seed(cfg.rng_seed, &["shuffle"]));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let points = data.points();
    let labels = data.labels();
    let mut final_loss = f64::NAN;
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = model
        .layers()
        .iter()
        .map(|l| (vec![0.0; l.weights.data().len()], vec![0.0; l.bias.len()]))
        .collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = ParamGradients {
                layers: model
                    .layers()
                    .iter()
                    .map(|l| (vec![0.0; l.weights.data().len()], vec![0.0; l.bias.len()]))
                    .collect(),
            };
            for &i in batch {
                let (loss, _) = model.backward(points.row(i), labels[i], Some(&mut grads));
                epoch_loss += loss;
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for ((layer, (dw, db)), (vw, vb)) in model
                .layers_mut()
                .iter_mut()
                .zip(&grads.layers)
                .zip(velocity.iter_mut())
            {
                let cols = layer.weights.cols();
                for (i, (g, v)) in dw.iter().zip(vw.iter_mut()).enumerate() {
                    *v = cfg.momentum * *v - scale * g;
                    let (r, c) = (i / cols, i % cols);
                    layer.weights.set(r, c, layer.weights.get(r, c) + *v);
                }
                for ((b, g), v) in layer.bias.iter_mut().zip(db).zip(vb.iter_mut()) {
                    *v = cfg.momentum * *v - scale * g;
                    *b += *v;
                }
            }
        }
        final_loss = epoch_loss / data.len() as f64;
        if !final_loss.is_finite() {
            return Err(Error::Numerical(
                "training diverged; lower the learning rate".into(),
            ));
        }
    }

    let acc = accuracy(&model, data);
    model.set_train_accuracy(acc);
    Ok((
        model,
        TrainReport {
            train_accuracy: acc,
            final_loss,
            warnings,
        },
    ))
}

pub fn accuracy(model: &MlpModel, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .points()
        .iter_rows()
        .zip(data.labels())
        .filter(|(x, &y)| model.predict(x) == y)
        .count();
    correct as f64 / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::data::blobs;

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let data = blobs(2, 4, 100, 0.05, 21).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            hidden: vec![8],
            rng_seed: 3,
            ..TrainConfig::default()
        };
        let (model, report) = train(&data, &cfg, "blob").unwrap();
        assert!(report.train_accuracy >= 0.95, "{report:?}");
        assert_eq!(model.train_accuracy(), Some(report.train_accuracy));
    }

    #[test]
    fn same_seed_same_bytes() {
        let data = blobs(3, 5, 30, 0.1, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            rng_seed: 9,
            ..TrainConfig::default()
        };
        let (a, _) = train(&data, &cfg, "m").unwrap();
        let (b, _) = train(&data, &cfg, "m").unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn zero_epochs_rejected() {
        let data = blobs(2, 2, 5, 0.1, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&data, &cfg, "m"), Err(Error::Config(_))));
    }

    #[test]
    fn single_class_trains_with_warning() {
        let pts = Matrix::new(4, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let data = Dataset::new(pts, vec![1; 4], 2).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (_, report) = train(&data, &cfg, "m").unwrap();
        assert_eq!(report.warnings.len(), 1);
    }
}
