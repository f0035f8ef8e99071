use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lime::Signature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    L1,
    L2,
    Linf,
    Cosine,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 4] = [
        DistanceMetric::L1,
        DistanceMetric::L2,
        DistanceMetric::Linf,
        DistanceMetric::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::L1 => "l1",
            DistanceMetric::L2 => "l2",
            DistanceMetric::Linf => "linf",
            DistanceMetric::Cosine => "cosine",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(DistanceMetric::L1),
            "l2" => Ok(DistanceMetric::L2),
            "linf" | "l-inf" | "l_inf" | "inf" => Ok(DistanceMetric::Linf),
            "cosine" | "cos" => Ok(DistanceMetric::Cosine),
            other => Err(Error::Config(format!(
                "unknown metric {other:?} (expected l1, l2, linf or cosine)"
            ))),
        }
    }
}

/// Unnormalised distance between two flattened signatures.
///
/// L-metrics use the norm of `a - b`; cosine uses `1 - a·b / (|a| |b|)`, clamped to
/// `[0, 2]`. Identical inputs are at distance exactly 0 under every metric.
pub fn vector_distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context: "flattened signature length",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
    let d = match metric {
        DistanceMetric::L1 => diffs.sum(),
        DistanceMetric::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        DistanceMetric::Linf => diffs.fold(0.0, f64::max),
        DistanceMetric::Cosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Undefined(
                    "cosine distance of a zero-norm signature".into(),
                ));
            }
            if a == b {
                return Ok(0.0);
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            1.0 - (dot / (na * nb)).clamp(-1.0, 1.0)
        }
    };
    Ok(d)
}

/// Zest distance between two signatures built on the same plan. Intercepts are excluded.
pub fn zest_distance(a: &Signature, b: &Signature, metric: DistanceMetric) -> Result<f64> {
    zest_distance_with(a, b, metric, false)
}

/// [`zest_distance`] with a switch to include the per-class intercepts.
pub fn zest_distance_with(
    a: &Signature,
    b: &Signature,
    metric: DistanceMetric,
    include_intercepts: bool,
) -> Result<f64> {
    if a.fingerprint() != b.fingerprint() {
        return Err(Error::Incomparable {
            left: a.fingerprint().to_string(),
            right: b.fingerprint().to_string(),
        });
    }
    vector_distance(
        &a.flatten(include_intercepts),
        &b.flatten(include_intercepts),
        metric,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, 0.0, 6.0];
        assert_eq!(vector_distance(&a, &b, DistanceMetric::Linf).unwrap(), 3.0);
        assert_eq!(vector_distance(&a, &b, DistanceMetric::L1).unwrap(), 5.0);
        assert_eq!(
            vector_distance(&a, &b, DistanceMetric::L2).unwrap(),
            13f64.sqrt()
        );
        assert_eq!(
            vector_distance(&[1.0, 0.0], &[0.0, 1.0], DistanceMetric::Cosine).unwrap(),
            1.0
        );
        assert_eq!(
            vector_distance(&[1.0, 0.0], &[-3.0, 0.0], DistanceMetric::Cosine).unwrap(),
            2.0
        );
    }

    #[test]
    fn zero_norm_cosine_is_undefined() {
        assert!(matches!(
            vector_distance(&[0.0, 0.0], &[1.0, 0.0], DistanceMetric::Cosine),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn parse_names() {
        for m in DistanceMetric::ALL {
            assert_eq!(m.name().parse::<DistanceMetric>().unwrap(), m);
        }
        assert!("l3".parse::<DistanceMetric>().is_err());
    }
}
