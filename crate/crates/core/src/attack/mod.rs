//! Untargeted L∞ PGD on a white-box surrogate, 8-bit quantization of the results, and
//! black-box transfer evaluation against a victim oracle.

mod batch;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use batch::{AdversarialBatch, PointOutcome};

use crate::error::{Error, Result};
use crate::linalg::{argmax, Matrix};
use crate::nn::{Dataset, MlpModel};
use crate::oracle::{LedgerSnapshot, QueryOracle, QueryPurpose};
use crate::seed::{derive_seed, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// L∞ budget.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub restarts: usize,
    pub rng_seed: u64,
    /// Round the final points to multiples of 1/255 (and re-score them).
    pub quantize_8bit: bool,
    /// Start each restart from a uniform point in the ε-ball instead of the original.
    pub random_init: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            step_size: 0.02,
            steps: 40,
            restarts: 5,
            rng_seed: 0,
            quantize_8bit: false,
            random_init: true,
        }
    }
}

impl AttackConfig {
    /// `epsilon == 0` is accepted as the degenerate empty ball: the attack returns the
    /// originals unchanged.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.restarts == 0 || self.steps == 0 {
            return Err(Error::Config("steps and restarts must be >= 1".into()));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::Config(format!(
                "step size must satisfy 0 < step <= epsilon ({} vs {})",
                self.step_size, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Moves `v` into `[lo_center - eps, lo_center + eps] ∩ [0, 1]` so that
/// `|v - center| <= eps` holds exactly in floating point.
fn project(v: f64, center: f64, eps: f64) -> f64 {
    let mut p = v.clamp(center - eps, center + eps).clamp(0.0, 1.0);
    while (p - center).abs() > eps {
        p = if p > center { p.next_down() } else { p.next_up() };
    }
    p
}

struct RestartResult {
    point: Vec<f64>,
    flipped: bool,
    loss: f64,
}

fn run_restart(model: &MlpModel, x0: &[f64], label: usize, cfg: &AttackConfig, seed: u64) -> RestartResult {
    let eps = cfg.epsilon;
    let mut x: Vec<f64> = if cfg.random_init {
        let mut r = rng(seed);
        x0.iter()
            .map(|&v| project(v + r.random_range(-eps..=eps), v, eps))
            .collect()
    } else {
        x0.to_vec()
    };
    for _ in 0..cfg.steps {
        let (_, grad) = model.backward(&x, label, None);
        for ((xi, &g), &c) in x.iter_mut().zip(&grad).zip(x0) {
            let step = if g > 0.0 {
                cfg.step_size
            } else if g < 0.0 {
                -cfg.step_size
            } else {
                0.0
            };
            *xi = project(*xi + step, c, eps);
        }
    }
    let logits = model.logits(&x);
    let (loss, _) = model.backward(&x, label, None);
    RestartResult {
        flipped: argmax(&logits) != label,
        loss,
        point: x,
    }
}

/// Runs PGD on every point of `data` against `model`.
///
/// Each restart iterates `x ← clip[0,1](clip[x0±ε](x + step · sign(∇x CE)))` for `steps`
/// steps. Among restarts the final iterate that flips the surrogate's prediction wins;
/// among equals the higher loss wins, then the earlier restart. Restart `r` of point `i`
/// draws from its own seeded stream, so results do not depend on thread scheduling.
pub fn pgd(model: &MlpModel, data: &Dataset, cfg: &AttackConfig) -> Result<AdversarialBatch> {
    cfg.validate()?;
    if data.dim() != model.input_dim() {
        return Err(Error::Shape {
            context: "attack data width",
            expected: model.input_dim(),
            actual: data.dim(),
        });
    }
    if data.class_count() > model.class_count() {
        return Err(Error::Domain("dataset has more classes than the surrogate".into()));
    }
    let per_point: Vec<(Vec<f64>, PointOutcome)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x0 = data.points().row(i);
            let y = data.labels()[i];
            let originally_correct = model.predict(x0) == y;
            if cfg.epsilon == 0.0 {
                let (loss, _) = model.backward(x0, y, None);
                return (
                    x0.to_vec(),
                    PointOutcome {
                        originally_correct,
                        local_success: false,
                        loss,
                        restart: 0,
                    },
                );
            }
            let mut best: Option<(usize, RestartResult)> = None;
            for r in 0..cfg.restarts {
                let seed = derive_seed(cfg.rng_seed, &["pgd", &i.to_string(), &r.to_string()]);
                let res = run_restart(model, x0, y, cfg, seed);
                let better = match &best {
                    None => true,
                    Some((_, b)) => (res.flipped, res.loss) > (b.flipped, b.loss),
                };
                if better {
                    best = Some((r, res));
                }
            }
            let (restart, res) = best.expect("restarts >= 1");
            (
                res.point,
                PointOutcome {
                    originally_correct,
                    local_success: originally_correct && res.flipped,
                    loss: res.loss,
                    restart,
                },
            )
        })
        .collect();

    let mut adv = Vec::with_capacity(data.len() * data.dim());
    let mut outcomes = Vec::with_capacity(data.len());
    for (p, o) in per_point {
        adv.extend(p);
        outcomes.push(o);
    }
    let mut batch = AdversarialBatch::new(
        data.points().clone(),
        data.labels().to_vec(),
        Matrix::new(data.len(), data.dim(), adv)?,
        cfg.epsilon,
        outcomes,
    )?;
    if cfg.quantize_8bit {
        batch = quantize(&batch);
        batch.rescore(model)?;
    }
    Ok(batch)
}

/// Nearest multiple of 1/255 that stays inside the ε-ball around `center`; when no grid
/// value lies in the ball, the original value is used.
fn quantize_value(v: f64, center: f64, eps: f64) -> f64 {
    let inside = |q: f64| (q - center).abs() <= eps && (0.0..=1.0).contains(&q);
    let k = (v * 255.0).round();
    let q = k / 255.0;
    if inside(q) {
        return q;
    }
    let toward = if q > center { k - 1.0 } else { k + 1.0 } / 255.0;
    if inside(toward) {
        toward
    } else {
        center
    }
}

/// Rounds every adversarial feature to the 8-bit grid `k/255`, keeping the ε budget.
/// Outcome flags are carried over unchanged; call [`AdversarialBatch::rescore`] to
/// refresh them.
pub fn quantize(batch: &AdversarialBatch) -> AdversarialBatch {
    let eps = batch.epsilon();
    let mut adv = batch.adversarials().clone();
    for i in 0..adv.rows() {
        let orig = batch.originals().row(i);
        for (a, &c) in adv.row_mut(i).iter_mut().zip(orig) {
            *a = quantize_value(*a, c, eps);
        }
    }
    batch.with_adversarials(adv)
}

/// Result of scoring an adversarial batch on a victim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    /// Points the victim got right originally and gets wrong after the attack.
    pub success_count: usize,
    /// Points the victim classifies correctly before the attack (the rate denominator).
    pub eligible: usize,
    pub already_misclassified: usize,
    pub total: usize,
    /// `success_count / eligible`, 0 when nothing is eligible.
    pub success_rate: f64,
    /// Adversarial points misclassified by the victim, over all points.
    pub raw_success_count: usize,
    pub raw_rate: f64,
    /// Per point: victim prediction on the adversarial differs from the label.
    pub evaded: Vec<bool>,
    pub queries: LedgerSnapshot,
}

/// Queries the victim on the originals and the adversarial points (both billed as
/// attack-eval queries) and counts successful transfers.
pub fn transfer_eval(victim: &dyn QueryOracle, batch: &AdversarialBatch) -> Result<TransferOutcome> {
    if victim.input_dim() != batch.originals().cols() {
        return Err(Error::Shape {
            context: "victim input width",
            expected: batch.originals().cols(),
            actual: victim.input_dim(),
        });
    }
    let before = victim.ledger().snapshot();
    let clean = victim.query(batch.originals(), QueryPurpose::AttackEval)?;
    let attacked = victim.query(batch.adversarials(), QueryPurpose::AttackEval)?;
    let queries = victim.ledger().snapshot().since(&before);

    let total = batch.len();
    let mut success_count = 0;
    let mut eligible = 0;
    let mut raw_success_count = 0;
    let mut evaded = Vec::with_capacity(total);
    for (i, &y) in batch.labels().iter().enumerate() {
        let correct_before = argmax(clean.row(i)) == y;
        let wrong_after = argmax(attacked.row(i)) != y;
        evaded.push(wrong_after);
        raw_success_count += wrong_after as usize;
        if correct_before {
            eligible += 1;
            success_count += wrong_after as usize;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(TransferOutcome {
        success_count,
        eligible,
        already_misclassified: total - eligible,
        total,
        success_rate: ratio(success_count, eligible),
        raw_success_count,
        raw_rate: ratio(raw_success_count, total),
        evaded,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};

    fn linear_model() -> MlpModel {
        let w = Matrix::new(3, 4, vec![
            1.0, -2.0, 0.5, 0.0, //
            -0.5, 1.0, 1.5, -1.0, //
            0.2, 0.3, -1.0, 2.0,
        ])
        .unwrap();
        MlpModel::new(
            "lin",
            vec![Layer::new(w, vec![0.1, 0.0, -0.1], Activation::Identity).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn single_step_matches_closed_form() {
        let m = linear_model();
        let x0 = vec![0.3, 0.5, 0.95, 0.02];
        let y = 1;
        let data = Dataset::new(Matrix::new(1, 4, x0.clone()).unwrap(), vec![y], 3).unwrap();
        let eps = 0.1;
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: eps,
            steps: 1,
            restarts: 1,
            random_init: false,
            ..AttackConfig::default()
        };
        let batch = pgd(&m, &data, &cfg).unwrap();
        // gradient of CE for linear softmax: Wᵀ (p - onehot(y))
        let p = m.predict_proba_row(&x0);
        let w = &m.layers()[0].weights;
        for j in 0..4 {
            let g: f64 = (0..3)
                .map(|k| w.get(k, j) * (p[k] - if k == y { 1.0 } else { 0.0 }))
                .sum();
            let expect = (x0[j] + eps * g.signum()).clamp(0.0, 1.0);
            assert!((batch.adversarials().get(0, j) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_epsilon_returns_originals() {
        let m = linear_model();
        let data = crate::nn::blobs(3, 4, 5, 0.1, 1).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        let batch = pgd(&m, &data, &cfg).unwrap();
        assert_eq!(batch.adversarials(), data.points());
        assert_eq!(batch.local_success_count(), 0);
    }

    #[test]
    fn config_validation() {
        let bad = |c: AttackConfig| c.validate().is_err();
        assert!(bad(AttackConfig { epsilon: -0.1, ..Default::default() }));
        assert!(bad(AttackConfig { step_size: 0.2, ..Default::default() }));
        assert!(bad(AttackConfig { restarts: 0, ..Default::default() }));
        assert!(AttackConfig::default().validate().is_ok());
    }

    #[test]
    fn projection_is_exact() {
        let c = 0.3;
        let eps = 0.1;
        let p = project(0.9, c, eps);
        assert!((p - c).abs() <= eps);
        assert!(project(-0.5, 0.05, eps) == 0.0);
    }

    #[test]
    fn quantize_hand_value_and_idempotence() {
        assert_eq!(quantize_value(0.5, 0.5, 0.1), 128.0 / 255.0);
        let m = linear_model();
        let data = crate::nn::blobs(3, 4, 10, 0.1, 4).unwrap();
        let batch = pgd(&m, &data, &AttackConfig::default()).unwrap();
        let q = quantize(&batch);
        assert_eq!(quantize(&q).adversarials(), q.adversarials());
        for i in 0..q.len() {
            assert!(q.linf_distortion(i) <= q.epsilon());
            for &v in q.adversarials().row(i) {
                assert!((v * 255.0 - (v * 255.0).round()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn quantize_falls_back_to_original_in_tiny_ball() {
        // no multiple of 1/255 within 1e-4 of 0.5001
        assert_eq!(quantize_value(0.50015, 0.5001, 1e-4), 0.5001);
    }
}
