use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const SIG_MAGIC: &[u8; 4] = b"ZSIG";
const SIG_VERSION: u32 = 1;

/// Local linear model around one reference point: `K x S` mask coefficients plus one
/// intercept per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PointModel {
    pub coefficients: Matrix,
    pub intercepts: Vec<f64>,
}

/// LIME representation of one model: `N` point models fitted on a shared plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Signature {
    model_id: String,
    fingerprint: String,
    class_count: usize,
    segments: usize,
    points: Vec<PointModel>,
}

impl Signature {
    pub fn new(
        model_id: impl Into<String>,
        fingerprint: impl Into<String>,
        points: Vec<PointModel>,
    ) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::Config("signature needs at least one point model".into()))?;
        let (k, s) = (first.coefficients.rows(), first.coefficients.cols());
        for p in &points {
            if p.coefficients.rows() != k || p.coefficients.cols() != s || p.intercepts.len() != k {
                return Err(Error::Shape {
                    context: "point model dimensions",
                    expected: k * s,
                    actual: p.coefficients.rows() * p.coefficients.cols(),
                });
            }
            if p.intercepts.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("intercept is not finite".into()));
            }
        }
        Ok(Self {
            model_id: model_id.into(),
            fingerprint: fingerprint.into(),
            class_count: k,
            segments: s,
            points,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn set_model_id(&mut self, id: impl Into<String>) {
        self.model_id = id.into();
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[PointModel] {
        &self.points
    }

    /// Flattens coefficients point-major, then class, then segment. With
    /// `include_intercepts` each class's intercept follows its segment coefficients.
    pub fn flatten(&self, include_intercepts: bool) -> Vec<f64> {
        let per_class = self.segments + include_intercepts as usize;
        let mut v = Vec::with_capacity(self.points.len() * self.class_count * per_class);
        for p in &self.points {
            for (k, row) in p.coefficients.iter_rows().enumerate() {
                v.extend_from_slice(row);
                if include_intercepts {
                    v.push(p.intercepts[k]);
                }
            }
        }
        v
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_header(SIG_MAGIC, SIG_VERSION);
        e.str(&self.fingerprint);
        e.str(&self.model_id);
        e.usize(self.points.len());
        e.usize(self.class_count);
        e.usize(self.segments);
        for p in &self.points {
            e.f64s(p.coefficients.data());
            e.f64s(&p.intercepts);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::with_header(bytes, SIG_MAGIC, SIG_VERSION)?;
        let fingerprint = d.str()?;
        let model_id = d.str()?;
        let n = d.usize()?;
        let k = d.usize()?;
        let s = d.usize()?;
        let per_point = k.saturating_mul(s).saturating_add(k).saturating_mul(8);
        if n.saturating_mul(per_point) > bytes.len() {
            return Err(Error::Format("declared signature size exceeds data".into()));
        }
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let coefficients = Matrix::new(k, s, d.f64s(k * s)?)
                .map_err(|e| Error::Format(e.to_string()))?;
            let intercepts = d.f64s(k)?;
            points.push(PointModel {
                coefficients,
                intercepts,
            });
        }
        d.finish()?;
        Self::new(model_id, fingerprint, points).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = codec::read_file(path)?;
        codec::in_file(path, Self::from_bytes(&bytes))
    }

    /// Human-readable companion: one CSV row per (point, class) with coefficient norms.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("point,class,coef_l2,coef_linf,intercept\n");
        for (i, p) in self.points.iter().enumerate() {
            for (k, row) in p.coefficients.iter_rows().enumerate() {
                let l2 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let linf = row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                let _ = writeln!(s, "{i},{k},{l2},{linf},{}", p.intercepts[k]);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig() -> Signature {
        let pts = (0..3)
            .map(|i| PointModel {
                coefficients: Matrix::new(2, 2, vec![i as f64, 1.0, -2.0, 0.5]).unwrap(),
                intercepts: vec![0.25, -0.25],
            })
            .collect();
        Signature::new("m", "fp", pts).unwrap()
    }

    #[test]
    fn flatten_order() {
        let s = sig();
        assert_eq!(&s.flatten(false)[..8], &[0.0, 1.0, -2.0, 0.5, 1.0, 1.0, -2.0, 0.5]);
        assert_eq!(&s.flatten(true)[..6], &[0.0, 1.0, 0.25, -2.0, 0.5, -0.25]);
    }

    #[test]
    fn bytes_round_trip() {
        let s = sig();
        let b = s.to_bytes();
        assert_eq!(Signature::from_bytes(&b).unwrap(), s);
        assert!(Signature::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn summary_has_row_per_point_class() {
        assert_eq!(sig().summary_csv().lines().count(), 1 + 3 * 2);
    }
}
