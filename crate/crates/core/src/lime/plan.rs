use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Dataset, MlpModel};
use crate::seed::{derive_seed, rng};

const PLAN_MAGIC: &[u8; 4] = b"ZPLN";
const PLAN_VERSION: u32 = 1;

/// Assignment of every input feature to one of `S` segments (LIME's super-pixels).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentGrid {
    assignment: Vec<usize>,
    segments: usize,
}

impl SegmentGrid {
    /// Segment indices must cover `0..S` with no gaps.
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::Config("segment grid needs at least one feature".into()));
        }
        let segments = assignment.iter().max().unwrap() + 1;
        let mut used = vec![false; segments];
        for &s in &assignment {
            used[s] = true;
        }
        if let Some(gap) = used.iter().position(|u| !u) {
            return Err(Error::Config(format!("segment {gap} has no features")));
        }
        Ok(Self {
            assignment,
            segments,
        })
    }

    /// `segments` contiguous feature ranges whose sizes differ by at most one.
    pub fn contiguous(input_dim: usize, segments: usize) -> Result<Self> {
        if segments == 0 || segments > input_dim {
            return Err(Error::Config(format!(
                "cannot split {input_dim} features into {segments} segments"
            )));
        }
        Self::new((0..input_dim).map(|j| j * segments / input_dim).collect())
    }

    /// Rectangular patches over a row-major `height x width` image. Edge patches may be
    /// smaller when the sides are not multiples of the patch size.
    pub fn patches(height: usize, width: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        if height == 0 || width == 0 || patch_h == 0 || patch_w == 0 {
            return Err(Error::Config("image and patch sides must be positive".into()));
        }
        let per_row = width.div_ceil(patch_w);
        let assignment = (0..height * width)
            .map(|p| (p / width / patch_h) * per_row + (p % width) / patch_w)
            .collect();
        Self::new(assignment)
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn input_dim(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn segment_of(&self, feature: usize) -> usize {
        self.assignment[feature]
    }
}

/// What a dropped segment's features become.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    /// Mean of that segment's features in the input being perturbed.
    SegmentMean,
    Zeros,
}

impl Replacement {
    fn code(self) -> u8 {
        match self {
            Replacement::SegmentMean => 0,
            Replacement::Zeros => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Replacement::SegmentMean),
            1 => Ok(Replacement::Zeros),
            _ => Err(Error::Format(format!("unknown replacement policy {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeConfig {
    /// Perturbations per reference point.
    pub perturbations: usize,
    /// Kernel width; `None` means `0.25 * sqrt(S)`.
    pub kernel_width: Option<f64>,
    /// Ridge penalty on the mask coefficients (the intercept is never penalised).
    pub ridge: f64,
    pub replacement: Replacement,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            perturbations: 1000,
            kernel_width: None,
            ridge: 1.0,
            replacement: Replacement::SegmentMean,
        }
    }
}

impl LimeConfig {
    pub fn kernel_width_for(&self, segments: usize) -> f64 {
        self.kernel_width
            .unwrap_or_else(|| 0.25 * (segments as f64).sqrt())
    }

    pub fn validate(&self, segments: usize) -> Result<()> {
        if self.perturbations < segments {
            return Err(Error::Config(format!(
                "need at least as many perturbations as segments ({} < {segments})",
                self.perturbations
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config("ridge penalty must be finite and >= 0".into()));
        }
        if let Some(w) = self.kernel_width {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config("kernel width must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Reference points, segmentation and binary masks shared by every model in a comparison.
///
/// The mask tensor is `N x P x S`, one byte per bit, and is a pure function of
/// `(seed, N, P, S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationPlan {
    seed: u64,
    references: Matrix,
    reference_labels: Vec<usize>,
    grid: SegmentGrid,
    config: LimeConfig,
    masks: Vec<u8>,
    references_verified: bool,
    fingerprint: String,
}

/// Mask tensor generator: every bit i.i.d. with probability 1/2.
pub fn generate_masks(seed: u64, n: usize, p: usize, s: usize) -> Vec<u8> {
    let mut r = rng(derive_seed(seed, &["masks"]));
    let total = n * p * s;
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        let word: u64 = r.random();
        for b in 0..64 {
            if out.len() == total {
                break;
            }
            out.push(((word >> b) & 1) as u8);
        }
    }
    out
}

impl PerturbationPlan {
    fn assemble(
        seed: u64,
        references: Matrix,
        reference_labels: Vec<usize>,
        grid: SegmentGrid,
        config: LimeConfig,
        references_verified: bool,
    ) -> Self {
        let n = references.rows();
        let masks = generate_masks(seed, n, config.perturbations, grid.segments());
        let mut plan = Self {
            seed,
            references,
            reference_labels,
            grid,
            config,
            masks,
            references_verified,
            fingerprint: String::new(),
        };
        plan.fingerprint = plan.compute_fingerprint();
        plan
    }

    fn compute_fingerprint(&self) -> String {
        let mut e = Encoder::default();
        e.u64(self.seed);
        e.usize(self.n_points());
        e.usize(self.config.perturbations);
        e.usize(self.grid.segments());
        e.usize(self.grid.input_dim());
        for &a in self.grid.assignment() {
            e.usize(a);
        }
        e.f64(self.kernel_width());
        e.f64(self.config.ridge);
        e.u8(self.config.replacement.code());
        e.f64s(self.references.data());
        for &l in &self.reference_labels {
            e.usize(l);
        }
        codec::sha256_hex(&e.finish())[..32].to_string()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_points(&self) -> usize {
        self.references.rows()
    }

    pub fn perturbations(&self) -> usize {
        self.config.perturbations
    }

    pub fn segments(&self) -> usize {
        self.grid.segments()
    }

    pub fn input_dim(&self) -> usize {
        self.grid.input_dim()
    }

    pub fn references(&self) -> &Matrix {
        &self.references
    }

    pub fn reference_labels(&self) -> &[usize] {
        &self.reference_labels
    }

    pub fn grid(&self) -> &SegmentGrid {
        &self.grid
    }

    pub fn config(&self) -> &LimeConfig {
        &self.config
    }

    pub fn kernel_width(&self) -> f64 {
        self.config.kernel_width_for(self.grid.segments())
    }

    /// Whether every reference point was checked to be classified correctly by the
    /// portfolio models given at plan creation.
    pub fn references_verified(&self) -> bool {
        self.references_verified
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Whole `N x P x S` mask tensor, row-major.
    pub fn masks(&self) -> &[u8] {
        &self.masks
    }

    /// The `P x S` masks belonging to reference point `i`.
    pub fn point_masks(&self, i: usize) -> &[u8] {
        let block = self.config.perturbations * self.grid.segments();
        &self.masks[i * block..(i + 1) * block]
    }

    /// Total perturbation queries one signature costs (`N x P`), baseline rows excluded.
    pub fn perturbation_queries(&self) -> u64 {
        (self.n_points() * self.config.perturbations) as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_header(PLAN_MAGIC, PLAN_VERSION);
        e.str(&self.fingerprint);
        e.u64(self.seed);
        e.usize(self.config.perturbations);
        match self.config.kernel_width {
            Some(w) => {
                e.u8(1);
                e.f64(w);
            }
            None => e.u8(0),
        }
        e.f64(self.config.ridge);
        e.u8(self.config.replacement.code());
        e.usize(self.grid.input_dim());
        for &a in self.grid.assignment() {
            e.usize(a);
        }
        e.usize(self.n_points());
        e.f64s(self.references.data());
        for &l in &self.reference_labels {
            e.usize(l);
        }
        e.u8(self.references_verified as u8);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::with_header(bytes, PLAN_MAGIC, PLAN_VERSION)?;
        let stored_fp = d.str()?;
        let seed = d.u64()?;
        let perturbations = d.usize()?;
        let kernel_width = match d.u8()? {
            0 => None,
            1 => Some(d.f64()?),
            t => return Err(Error::Format(format!("bad kernel width tag {t}"))),
        };
        let ridge = d.f64()?;
        let replacement = Replacement::from_code(d.u8()?)?;
        let dim = d.len(8)?;
        let assignment = (0..dim).map(|_| d.usize()).collect::<Result<Vec<_>>>()?;
        let n = d.len(8)?;
        let refs = d.f64s(n.saturating_mul(dim))?;
        let labels = (0..n).map(|_| d.usize()).collect::<Result<Vec<_>>>()?;
        let verified = d.u8()? != 0;
        d.finish()?;
        let grid = SegmentGrid::new(assignment).map_err(|e| Error::Format(e.to_string()))?;
        let config = LimeConfig {
            perturbations,
            kernel_width,
            ridge,
            replacement,
        };
        config
            .validate(grid.segments())
            .map_err(|e| Error::Format(e.to_string()))?;
        let references = Matrix::new(n, dim, refs).map_err(|e| Error::Format(e.to_string()))?;
        let plan = Self::assemble(seed, references, labels, grid, config, verified);
        if plan.fingerprint != stored_fp {
            return Err(Error::Format(format!(
                "plan fingerprint mismatch: stored {stored_fp}, recomputed {}",
                plan.fingerprint
            )));
        }
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = codec::read_file(path)?;
        codec::in_file(path, Self::from_bytes(&bytes))
    }
}

fn check_plan_inputs(data: &Dataset, n: usize, grid: &SegmentGrid, cfg: &LimeConfig) -> Result<()> {
    cfg.validate(grid.segments())?;
    if grid.input_dim() != data.dim() {
        return Err(Error::Shape {
            context: "segment grid vs dataset width",
            expected: data.dim(),
            actual: grid.input_dim(),
        });
    }
    if n == 0 {
        return Err(Error::Config("plan needs at least one reference point".into()));
    }
    Ok(())
}

fn sample_references(
    data: &Dataset,
    candidates: &[usize],
    n: usize,
    seed: u64,
) -> Result<(Matrix, Vec<usize>)> {
    if n > candidates.len() {
        return Err(Error::Config(format!(
            "requested {n} reference points but only {} are available",
            candidates.len()
        )));
    }
    let mut r = rng(derive_seed(seed, &["references"]));
    let picked: Vec<usize> = rand::seq::index::sample(&mut r, candidates.len(), n)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    let refs = data.points().select_rows(&picked);
    let labels = picked.iter().map(|&i| data.labels()[i]).collect();
    Ok((refs, labels))
}

/// Samples `n` reference points from `data` and derives the mask tensor, all from `seed`.
pub fn make_plan(
    data: &Dataset,
    n: usize,
    grid: SegmentGrid,
    cfg: LimeConfig,
    seed: u64,
) -> Result<PerturbationPlan> {
    check_plan_inputs(data, n, &grid, &cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (refs, labels) = sample_references(data, &all, n, seed)?;
    Ok(PerturbationPlan::assemble(seed, refs, labels, grid, cfg, false))
}

/// Like [`make_plan`], but only samples points that every model in `portfolio`
/// classifies correctly, and records that the references were verified.
pub fn make_plan_verified(
    data: &Dataset,
    n: usize,
    grid: SegmentGrid,
    cfg: LimeConfig,
    seed: u64,
    portfolio: &[&MlpModel],
) -> Result<PerturbationPlan> {
    check_plan_inputs(data, n, &grid, &cfg)?;
    let candidates: Vec<usize> = (0..data.len())
        .filter(|&i| {
            let x = data.points().row(i);
            portfolio.iter().all(|m| m.predict(x) == data.labels()[i])
        })
        .collect();
    let (refs, labels) = sample_references(data, &candidates, n, seed)?;
    Ok(PerturbationPlan::assemble(seed, refs, labels, grid, cfg, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::blobs;

    #[test]
    fn contiguous_grid_sizes() {
        let g = SegmentGrid::contiguous(10, 4).unwrap();
        assert_eq!(g.assignment(), &[0, 0, 0, 1, 1, 2, 2, 2, 3, 3]);
        assert!(SegmentGrid::contiguous(3, 4).is_err());
    }

    #[test]
    fn patch_grid_layout() {
        let g = SegmentGrid::patches(4, 4, 2, 2).unwrap();
        assert_eq!(g.segments(), 4);
        assert_eq!(g.assignment()[0..4], [0, 0, 1, 1]);
        assert_eq!(g.assignment()[12..16], [2, 2, 3, 3]);
        assert!(SegmentGrid::new(vec![0, 2]).is_err());
    }

    #[test]
    fn plan_shapes_and_determinism() {
        let data = blobs(3, 16, 60, 0.1, 1).unwrap();
        let grid = SegmentGrid::contiguous(16, 4).unwrap();
        let a = make_plan(&data, 128, grid.clone(), LimeConfig::default(), 42).unwrap();
        assert_eq!(a.masks().len(), 128 * 1000 * 4);
        assert_eq!(a.perturbation_queries(), 128_000);
        let b = make_plan(&data, 128, grid.clone(), LimeConfig::default(), 42).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = make_plan(&data, 128, grid, LimeConfig::default(), 43).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn masks_depend_only_on_seed_and_sizes() {
        assert_eq!(generate_masks(7, 3, 20, 5), generate_masks(7, 3, 20, 5));
        let m = generate_masks(7, 50, 100, 8);
        let ones = m.iter().filter(|&&b| b == 1).count() as f64 / m.len() as f64;
        assert!((ones - 0.5).abs() < 0.01);
    }

    #[test]
    fn too_many_points_is_an_error() {
        let data = blobs(2, 4, 5, 0.1, 1).unwrap();
        let grid = SegmentGrid::contiguous(4, 2).unwrap();
        assert!(matches!(
            make_plan(&data, 11, grid, LimeConfig::default(), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn plan_file_round_trip() {
        let data = blobs(2, 6, 20, 0.1, 3).unwrap();
        let grid = SegmentGrid::contiguous(6, 3).unwrap();
        let cfg = LimeConfig {
            perturbations: 12,
            ..LimeConfig::default()
        };
        let plan = make_plan(&data, 5, grid, cfg, 9).unwrap();
        let back = PerturbationPlan::from_bytes(&plan.to_bytes()).unwrap();
        assert_eq!(back, plan);
        let mut bytes = plan.to_bytes();
        let last = bytes.len() - 20;
        bytes[last] ^= 0x40;
        assert!(PerturbationPlan::from_bytes(&bytes).is_err());
    }
}
