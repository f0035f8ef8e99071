//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use zest_core::attack::{AdversarialBatch, PointOutcome};
use zest_core::linalg::{argmax, Matrix};
use zest_core::nn::MlpModel;
use zest_core::seed::rng;
use zest_core::oracle::{QueryLedger, QueryOracle, QueryPurpose};
use zest_core::Result;

/// Oracle whose scores are `bias + weights · x` per class. Under mask replacement its
/// answers are affine in the mask bits.
pub struct AffineOracle {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    ledger: QueryLedger,
}

impl AffineOracle {
    pub fn random(dim: usize, classes: usize, r: &mut impl Rng) -> Self {
        Self {
            weights: (0..classes)
                .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect(),
            bias: (0..classes).map(|_| r.random_range(-1.0..1.0)).collect(),
            ledger: QueryLedger::new(),
        }
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }
}

impl QueryOracle for AffineOracle {
    fn oracle_id(&self) -> &str {
        "affine"
    }

    fn class_count(&self) -> usize {
        self.bias.len()
    }

    fn input_dim(&self) -> usize {
        self.weights[0].len()
    }

    fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    fn query(&self, batch: &Matrix, purpose: QueryPurpose) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = batch.iter_rows().map(|x| self.score(x)).collect();
        self.ledger.record(purpose, batch.rows() as u64);
        Matrix::from_rows(&rows, self.class_count())
    }
}

/// Per-segment feature means of `x`.
pub fn segment_means(x: &[f64], assignment: &[usize], segments: usize) -> Vec<f64> {
    let mut sum = vec![0.0; segments];
    let mut count = vec![0.0; segments];
    for (v, &s) in x.iter().zip(assignment) {
        sum[s] += v;
        count[s] += 1.0;
    }
    sum.iter().zip(&count).map(|(a, c)| a / c).collect()
}

/// Kernel weight of a mask computed from first principles.
pub fn mask_weight(mask: &[u8]) -> f64 {
    let s = mask.len() as f64;
    let kept = mask.iter().filter(|&&b| b == 1).count() as f64;
    let d = if kept == 0.0 { 1.0 } else { 1.0 - (kept / s).sqrt() };
    let width = 0.25 * s.sqrt();
    (-(d * d) / (width * width)).exp()
}

/// Regression rows of a LIME fit: the all-ones baseline row with weight 1 followed by
/// one row per mask.
pub fn regression_rows(masks: &[u8], s: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut design = vec![vec![1.0; s]];
    let mut weights = vec![1.0];
    for m in masks.chunks_exact(s) {
        design.push(m.iter().map(|&b| b as f64).collect());
        weights.push(mask_weight(m));
    }
    (design, weights)
}

/// Weighted least squares via an SVD of `sqrt(W) [1 | X]`. Returns `(intercept, coefs)`.
pub fn wls_reference(design: &[Vec<f64>], weights: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let rows = design.len();
    let cols = design[0].len() + 1;
    let a = DMatrix::from_fn(rows, cols, |i, j| {
        let v = if j == 0 { 1.0 } else { design[i][j - 1] };
        weights[i].sqrt() * v
    });
    let b = DVector::from_fn(rows, |i, _| weights[i].sqrt() * y[i]);
    let theta = a.svd(true, true).solve(&b, 1e-14).expect("svd solve");
    (theta[0], theta.iter().skip(1).copied().collect())
}

/// Relative error `|a - b| / max(|a|, |b|)` of two vectors, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// One LIME fit against an affine oracle, with three routes to the coefficients.
pub struct LimeCase {
    /// Library fit: `K x S` coefficients and `K` intercepts.
    pub fitted: (Vec<Vec<f64>>, Vec<f64>),
    /// SVD weighted least squares over independently rebuilt regression rows.
    pub reference: (Vec<Vec<f64>>, Vec<f64>),
    /// Closed form read off the oracle's weights.
    pub exact: (Vec<Vec<f64>>, Vec<f64>),
}

/// `None` when the sampled masks do not determine an unpenalised fit.
pub fn lime_case(seed: u64, segments: usize, perturbations: usize, classes: usize) -> Option<LimeCase> {
    use zest_core::lime::{fit_point_model, generate_masks, LimeConfig, Replacement, SegmentGrid};

    let mut r = rng(seed);
    let dim = segments * r.random_range(1..=3usize);
    let x: Vec<f64> = (0..dim).map(|_| r.random()).collect();
    let oracle = AffineOracle::random(dim, classes, &mut r);
    let grid = SegmentGrid::contiguous(dim, segments).unwrap();
    let assignment = grid.assignment().to_vec();
    let masks = generate_masks(seed, 1, perturbations, segments);
    let cfg = LimeConfig {
        perturbations,
        kernel_width: None,
        ridge: 0.0,
        replacement: Replacement::SegmentMean,
    };
    let fit = match fit_point_model(&oracle, &x, &masks, &grid, &cfg) {
        Ok(f) => f,
        Err(zest_core::Error::Numerical(_)) => return None,
        Err(e) => panic!("{e}"),
    };
    let fitted = (
        (0..classes).map(|k| fit.coefficients.row(k).to_vec()).collect(),
        fit.intercepts.clone(),
    );

    let means = segment_means(&x, &assignment, segments);
    let (design, weights) = regression_rows(&masks, segments);
    let mut targets = vec![oracle.score(&x)];
    for m in masks.chunks_exact(segments) {
        let xp: Vec<f64> = (0..dim)
            .map(|j| if m[assignment[j]] == 1 { x[j] } else { means[assignment[j]] })
            .collect();
        targets.push(oracle.score(&xp));
    }
    let mut reference = (Vec::new(), Vec::new());
    for k in 0..classes {
        let y: Vec<f64> = targets.iter().map(|t| t[k]).collect();
        let (b, c) = wls_reference(&design, &weights, &y);
        reference.0.push(c);
        reference.1.push(b);
    }

    let mut exact = (Vec::new(), Vec::new());
    for k in 0..classes {
        let w = &oracle.weights[k];
        let mut coef = vec![0.0; segments];
        let mut intercept = oracle.bias[k];
        for j in 0..dim {
            let s = assignment[j];
            coef[s] += w[j] * (x[j] - means[s]);
            intercept += w[j] * means[s];
        }
        exact.0.push(coef);
        exact.1.push(intercept);
    }
    Some(LimeCase { fitted, reference, exact })
}

/// Largest absolute entry-wise gap between two coefficient sets.
pub fn max_gap(a: &(Vec<Vec<f64>>, Vec<f64>), b: &(Vec<Vec<f64>>, Vec<f64>)) -> f64 {
    let coef = a.0.iter().flatten().zip(b.0.iter().flatten());
    let icpt = a.1.iter().zip(&b.1);
    coef.chain(icpt).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Uniform `[0,1]` matrix.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::new(rows, cols, (0..rows * cols).map(|_| r.random::<f64>()).collect()).unwrap()
}

pub fn random_batch_with_eps(seed: u64, rows: usize, dim: usize, classes: usize, eps: f64) -> AdversarialBatch {
    let mut r = rng(seed);
    let originals = random_matrix(rows, dim, seed ^ 7);
    let adv: Vec<f64> = originals
        .data()
        .iter()
        .map(|&x| {
            let a = if r.random_bool(0.3) { x } else { x + r.random_range(-eps..=eps) };
            let a = a.clamp(0.0, 1.0);
            if (a - x).abs() <= eps { a } else { x }
        })
        .collect();
    let labels = (0..rows).map(|_| r.random_range(0..classes)).collect();
    let outcomes = vec![
        PointOutcome { originally_correct: false, local_success: false, loss: 0.0, restart: 0 };
        rows
    ];
    AdversarialBatch::new(originals, labels, Matrix::new(rows, dim, adv).unwrap(), eps, outcomes).unwrap()
}

pub fn random_batch(seed: u64, rows: usize, dim: usize, classes: usize) -> AdversarialBatch {
    random_batch_with_eps(seed, rows, dim, classes, 0.5)
}

/// Per-point recount through single-row predictions.
pub fn recount(victim: &MlpModel, batch: &AdversarialBatch) -> (usize, usize, usize) {
    let (mut success, mut eligible, mut raw) = (0, 0, 0);
    for (i, &y) in batch.labels().iter().enumerate() {
        let before = argmax(&victim.predict_proba_row(batch.originals().row(i)));
        let after = argmax(&victim.predict_proba_row(batch.adversarials().row(i)));
        if after != y {
            raw += 1;
        }
        if before == y {
            eligible += 1;
            if after != y {
                success += 1;
            }
        }
    }
    (success, eligible, raw)
}
