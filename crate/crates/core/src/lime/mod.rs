//! LIME signatures computed through a query oracle.
//!
//! For each of `N` reference points the oracle is asked about `P` perturbed copies, where
//! each copy keeps or drops whole feature segments according to a binary mask. A
//! kernel-weighted ridge regression of every class probability on the mask bits gives one
//! local linear model per point; the `N` models form the signature.
//!
//! The unperturbed reference point is queried too (once per point, billed as a baseline
//! query) and enters the regression as the all-ones mask with weight 1.

mod plan;
mod signature;

use rayon::prelude::*;

pub use plan::{
    generate_masks, make_plan, make_plan_verified, LimeConfig, PerturbationPlan, Replacement,
    SegmentGrid,
};
pub use signature::{PointModel, Signature};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::oracle::{QueryOracle, QueryPurpose};

/// Replaces the features of dropped segments (`mask[s] == 0`) according to `policy`.
pub fn apply_mask(x: &[f64], mask: &[u8], grid: &SegmentGrid, policy: Replacement) -> Vec<f64> {
    debug_assert_eq!(x.len(), grid.input_dim());
    debug_assert_eq!(mask.len(), grid.segments());
    let fill = match policy {
        Replacement::Zeros => vec![0.0; grid.segments()],
        Replacement::SegmentMean => segment_means(x, grid),
    };
    x.iter()
        .enumerate()
        .map(|(j, &v)| {
            let s = grid.segment_of(j);
            if mask[s] != 0 {
                v
            } else {
                fill[s]
            }
        })
        .collect()
}

fn segment_means(x: &[f64], grid: &SegmentGrid) -> Vec<f64> {
    let mut sum = vec![0.0; grid.segments()];
    let mut count = vec![0usize; grid.segments()];
    for (j, &v) in x.iter().enumerate() {
        let s = grid.segment_of(j);
        sum[s] += v;
        count[s] += 1;
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
}

/// Cosine distance between a mask and the all-ones mask, `1 - sqrt(k / S)` for `k` kept
/// segments. The all-zeros mask is taken to be at distance 1.
pub fn mask_distance(mask: &[u8]) -> f64 {
    let kept = mask.iter().filter(|&&b| b != 0).count();
    if kept == 0 {
        return 1.0;
    }
    1.0 - (kept as f64 / mask.len() as f64).sqrt()
}

/// Exponential kernel `exp(-d^2 / width^2)`.
pub fn kernel_weight(distance: f64, width: f64) -> f64 {
    (-(distance * distance) / (width * width)).exp()
}

/// Weighted ridge regression with an unpenalised intercept, solved through the normal
/// equations `(Xᵀ W X + λ D) θ = Xᵀ W y` where `X = [1 | design]` and `D` zeroes the
/// intercept entry. All `K` target columns share one factorisation.
///
/// Returns the `K x S` coefficient matrix and the `K` intercepts.
pub fn weighted_ridge(
    design: &Matrix,
    targets: &Matrix,
    weights: &[f64],
    ridge: f64,
) -> Result<(Matrix, Vec<f64>)> {
    let rows = design.rows();
    if targets.rows() != rows || weights.len() != rows {
        return Err(Error::Shape {
            context: "regression rows",
            expected: rows,
            actual: targets.rows().min(weights.len()),
        });
    }
    let s = design.cols();
    let n = s + 1;
    let k = targets.cols();
    let mut gram = vec![0.0; n * n];
    let mut rhs = vec![0.0; n * k];
    let mut aug = vec![0.0; n];
    for i in 0..rows {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        aug[0] = 1.0;
        aug[1..].copy_from_slice(design.row(i));
        for a in 0..n {
            let wa = w * aug[a];
            if wa == 0.0 {
                continue;
            }
            for b in a..n {
                gram[a * n + b] += wa * aug[b];
            }
            for (c, &y) in targets.row(i).iter().enumerate() {
                rhs[c * n + a] += wa * y;
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            gram[a * n + b] = gram[b * n + a];
        }
    }
    for j in 1..n {
        gram[j * n + j] += ridge;
    }
    let chol = Cholesky::factor(&gram, n).map_err(|e| {
        if ridge == 0.0 {
            Error::Numerical(format!(
                "{e}; the masks do not determine the regression, use a ridge penalty > 0"
            ))
        } else {
            e
        }
    })?;
    let mut coef = Vec::with_capacity(k * s);
    let mut intercepts = Vec::with_capacity(k);
    for c in 0..k {
        let theta = chol.solve(&rhs[c * n..(c + 1) * n]);
        intercepts.push(theta[0]);
        coef.extend_from_slice(&theta[1..]);
    }
    Ok((Matrix::new(k, s, coef)?, intercepts))
}

/// Fits the local model around `x` from the `P x S` masks in `masks` (row-major).
pub fn fit_point_model(
    oracle: &dyn QueryOracle,
    x: &[f64],
    masks: &[u8],
    grid: &SegmentGrid,
    cfg: &LimeConfig,
) -> Result<PointModel> {
    let s = grid.segments();
    cfg.validate(s)?;
    if x.len() != oracle.input_dim() || grid.input_dim() != oracle.input_dim() {
        return Err(Error::Shape {
            context: "reference point vs oracle input",
            expected: oracle.input_dim(),
            actual: x.len(),
        });
    }
    if !masks.len().is_multiple_of(s) || masks.len() / s < s {
        return Err(Error::Config(format!(
            "mask block of {} bits does not hold at least {s} masks of {s} segments",
            masks.len()
        )));
    }
    let p = masks.len() / s;

    let mut perturbed = Vec::with_capacity(p * x.len());
    for m in masks.chunks_exact(s) {
        perturbed.extend(apply_mask(x, m, grid, cfg.replacement));
    }
    let perturbed = Matrix::new(p, x.len(), perturbed)?;
    let probs = oracle.query(&perturbed, QueryPurpose::Signature)?;
    let base = oracle.query(&Matrix::new(1, x.len(), x.to_vec())?, QueryPurpose::Baseline)?;
    let k = oracle.class_count();
    if probs.rows() != p || probs.cols() != k || base.rows() != 1 || base.cols() != k {
        return Err(Error::Protocol("oracle answer has the wrong shape".into()));
    }

    let width = cfg.kernel_width_for(s);
    let mut design = Vec::with_capacity((p + 1) * s);
    let mut targets = Vec::with_capacity((p + 1) * k);
    let mut weights = Vec::with_capacity(p + 1);
    design.extend(std::iter::repeat_n(1.0, s));
    targets.extend_from_slice(base.row(0));
    weights.push(1.0);
    for (i, m) in masks.chunks_exact(s).enumerate() {
        design.extend(m.iter().map(|&b| b as f64));
        targets.extend_from_slice(probs.row(i));
        weights.push(kernel_weight(mask_distance(m), width));
    }
    let design = Matrix::new(p + 1, s, design)?;
    let targets = Matrix::new(p + 1, k, targets)?;
    let (coefficients, intercepts) = weighted_ridge(&design, &targets, &weights, cfg.ridge)?;
    Ok(PointModel {
        coefficients,
        intercepts,
    })
}

/// Computes the signature of `oracle` over `plan`. Costs exactly `N x P` perturbation
/// queries plus `N` baseline queries. Reference points are fitted in parallel; the
/// result is in plan order and does not depend on scheduling.
pub fn compute_signature(oracle: &dyn QueryOracle, plan: &PerturbationPlan) -> Result<Signature> {
    if plan.input_dim() != oracle.input_dim() {
        return Err(Error::Shape {
            context: "plan vs oracle input width",
            expected: oracle.input_dim(),
            actual: plan.input_dim(),
        });
    }
    let n = plan.n_points();
    let fits: Vec<Result<PointModel>> = (0..n)
        .into_par_iter()
        .map(|i| {
            fit_point_model(
                oracle,
                plan.references().row(i),
                plan.point_masks(i),
                plan.grid(),
                plan.config(),
            )
        })
        .collect();
    let completed = fits.iter().filter(|r| r.is_ok()).count();
    let mut points = Vec::with_capacity(n);
    for fit in fits {
        match fit {
            Ok(p) => points.push(p),
            Err(e) => {
                return Err(Error::Partial {
                    stage: "signature",
                    completed,
                    total: n,
                    source: Box::new(e),
                })
            }
        }
    }
    Signature::new(oracle.oracle_id(), plan.fingerprint(), points)
}
