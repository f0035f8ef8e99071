use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::{derive_seed, rng};

/// Labelled examples with every feature in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(points: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != points.rows() {
            return Err(Error::Shape {
                context: "dataset labels",
                expected: points.rows(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if points.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("dataset features must lie in [0, 1]".into()));
        }
        Ok(Self {
            points,
            labels,
            class_count,
        })
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            points: self.points.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Number of distinct labels actually present.
    pub fn distinct_labels(&self) -> usize {
        let mut seen = vec![false; self.class_count];
        for &l in &self.labels {
            seen[l] = true;
        }
        seen.into_iter().filter(|&s| s).count()
    }

    /// Seeded shuffle-and-split; the first part has `round(len * fraction)` rows.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config("split fraction must be in [0, 1]".into()));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng(seed));
        let cut = (self.len() as f64 * fraction).round() as usize;
        Ok((self.subset(&idx[..cut]), self.subset(&idx[cut..])))
    }

    /// CSV with a header row `label,x0,x1,...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for j in 0..self.dim() {
            let _ = write!(s, ",x{j}");
        }
        s.push('\n');
        for (row, label) in self.points.iter_rows().zip(&self.labels) {
            let _ = write!(s, "{label}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses the CSV written by [`Dataset::to_csv`]. `class_count` defaults to max label + 1.
    pub fn from_csv(text: &str, class_count: Option<usize>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))?;
        let dim = header.split(',').count().saturating_sub(1);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let label = fields
                .next()
                .and_then(|f| f.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Format(format!("row {}: bad label", n + 1)))?;
            let before = data.len();
            for f in fields {
                data.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("row {}: bad value {f:?}", n + 1)))?,
                );
            }
            if data.len() - before != dim {
                return Err(Error::Format(format!(
                    "row {}: expected {dim} features, found {}",
                    n + 1,
                    data.len() - before
                )));
            }
            labels.push(label);
        }
        let k = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(Matrix::new(labels.len(), dim, data)?, labels, k)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        codec::in_file(path, Self::from_csv(&text, None))
    }
}

/// Recipes for seeded synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    /// Isotropic Gaussian clusters around centers drawn uniformly from `[0.2, 0.8]^dim`,
    /// clipped to `[0, 1]`.
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
    },
    /// Digits-style `side x side` images: each class owns a prototype made of a few random
    /// strokes; samples are the prototype shifted by at most one pixel, with pixel noise.
    Glyphs {
        classes: usize,
        side: usize,
        per_class: usize,
        strokes: usize,
        noise: f64,
    },
}

impl SyntheticSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match *self {
            SyntheticSpec::Blobs {
                classes,
                dim,
                per_class,
                spread,
            } => blobs(classes, dim, per_class, spread, seed),
            SyntheticSpec::Glyphs {
                classes,
                side,
                per_class,
                strokes,
                noise,
            } => glyphs(classes, side, per_class, strokes, noise, seed),
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            SyntheticSpec::Blobs { dim, .. } => dim,
            SyntheticSpec::Glyphs { side, .. } => side * side,
        }
    }
}

pub fn blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 || per_class == 0 || spread.is_nan() || spread <= 0.0 {
        return Err(Error::Config(
            "blobs need >= 2 classes, dim >= 1, per_class >= 1 and spread > 0".into(),
        ));
    }
    let mut r = rng(derive_seed(seed, &["blobs"]));
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| r.random_range(0.2..0.8)).collect())
        .collect();
    let noise = Normal::new(0.0, spread).expect("positive spread");
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (k, c) in centers.iter().enumerate() {
            data.extend(c.iter().map(|&m| (m + noise.sample(&mut r)).clamp(0.0, 1.0)));
            labels.push(k);
        }
    }
    Dataset::new(Matrix::new(labels.len(), dim, data)?, labels, classes)
}

pub fn glyphs(
    classes: usize,
    side: usize,
    per_class: usize,
    strokes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || side < 3 || per_class == 0 || strokes == 0 || noise.is_nan() || noise < 0.0 {
        return Err(Error::Config(
            "glyphs need >= 2 classes, side >= 3, per_class >= 1, strokes >= 1, noise >= 0".into(),
        ));
    }
    let mut r = rng(derive_seed(seed, &["glyphs"]));
    let dim = side * side;
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut img = vec![0.0; dim];
            for _ in 0..strokes {
                let horizontal = r.random_bool(0.5);
                let fixed = r.random_range(0..side);
                let start = r.random_range(0..side - 1);
                let len = r.random_range(2..=side - start);
                for t in start..start + len {
                    let (row, col) = if horizontal { (fixed, t) } else { (t, fixed) };
                    img[row * side + col] = 1.0;
                }
            }
            img
        })
        .collect();
    let pixel_noise = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (k, proto) in prototypes.iter().enumerate() {
            let dr = r.random_range(-1i64..=1);
            let dc = r.random_range(-1i64..=1);
            let intensity = r.random_range(0.6..1.0);
            for row in 0..side as i64 {
                for col in 0..side as i64 {
                    let (sr, sc) = (row - dr, col - dc);
                    let base = if (0..side as i64).contains(&sr) && (0..side as i64).contains(&sc) {
                        proto[sr as usize * side + sc as usize] * intensity
                    } else {
                        0.0
                    };
                    let v = if noise > 0.0 {
                        base + pixel_noise.sample(&mut r)
                    } else {
                        base
                    };
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(k);
        }
    }
    Dataset::new(Matrix::new(labels.len(), dim, data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_features_and_labels() {
        let m = Matrix::new(1, 2, vec![0.5, 1.5]).unwrap();
        assert!(Dataset::new(m, vec![0], 2).is_err());
        let m = Matrix::new(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(Dataset::new(m, vec![2], 2).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = blobs(3, 4, 5, 0.1, 9).unwrap();
        let back = Dataset::from_csv(&d.to_csv(), Some(3)).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn generators_are_seeded() {
        let a = glyphs(4, 8, 10, 3, 0.05, 1).unwrap();
        let b = glyphs(4, 8, 10, 3, 0.05, 1).unwrap();
        let c = glyphs(4, 8, 10, 3, 0.05, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.dim(), 64);
        assert_eq!(a.len(), 40);
    }

    #[test]
    fn split_partitions_rows() {
        let d = blobs(2, 3, 50, 0.1, 4).unwrap();
        let (a, b) = d.split(0.3, 7).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(b.len(), 70);
    }
}
