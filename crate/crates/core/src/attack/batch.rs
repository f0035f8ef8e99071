use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::MlpModel;

const BATCH_MAGIC: &[u8; 4] = b"ZADV";
const BATCH_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointOutcome {
    /// Surrogate classified the original correctly.
    pub originally_correct: bool,
    /// Originally correct and misclassified by the surrogate after the attack.
    pub local_success: bool,
    /// Surrogate cross-entropy at the adversarial point.
    pub loss: f64,
    /// Restart that produced the point.
    pub restart: usize,
}

/// Originals from the clean test set, their adversarial counterparts and per-point
/// provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    originals: Matrix,
    labels: Vec<usize>,
    adversarials: Matrix,
    epsilon: f64,
    outcomes: Vec<PointOutcome>,
}

impl AdversarialBatch {
    /// Checks shapes and the budget: every adversarial feature lies in `[0, 1]` and within
    /// `epsilon` of its original.
    pub fn new(
        originals: Matrix,
        labels: Vec<usize>,
        adversarials: Matrix,
        epsilon: f64,
        outcomes: Vec<PointOutcome>,
    ) -> Result<Self> {
        if originals.rows() != adversarials.rows()
            || originals.cols() != adversarials.cols()
            || labels.len() != originals.rows()
            || outcomes.len() != originals.rows()
        {
            return Err(Error::Shape {
                context: "adversarial batch",
                expected: originals.rows(),
                actual: adversarials.rows(),
            });
        }
        let batch = Self {
            originals,
            labels,
            adversarials,
            epsilon,
            outcomes,
        };
        for i in 0..batch.len() {
            let a = batch.adversarials.row(i);
            if a.iter().any(|v| !(0.0..=1.0).contains(v)) || batch.linf_distortion(i) > epsilon {
                return Err(Error::Domain(format!(
                    "adversarial point {i} violates the [0,1] box or the epsilon budget"
                )));
            }
        }
        Ok(batch)
    }

    pub(crate) fn with_adversarials(&self, adversarials: Matrix) -> Self {
        Self {
            adversarials,
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn originals(&self) -> &Matrix {
        &self.originals
    }

    pub fn adversarials(&self) -> &Matrix {
        &self.adversarials
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn outcomes(&self) -> &[PointOutcome] {
        &self.outcomes
    }

    pub fn linf_distortion(&self, i: usize) -> f64 {
        self.adversarials
            .row(i)
            .iter()
            .zip(self.originals.row(i))
            .fold(0.0, |m, (a, o)| m.max((a - o).abs()))
    }

    pub fn local_success_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.local_success).count()
    }

    /// Local successes over the points the surrogate originally got right.
    pub fn local_success_rate(&self) -> f64 {
        let eligible = self.outcomes.iter().filter(|o| o.originally_correct).count();
        if eligible == 0 {
            0.0
        } else {
            self.local_success_count() as f64 / eligible as f64
        }
    }

    /// Recomputes outcome flags and losses against `model` (e.g. after quantization).
    pub fn rescore(&mut self, model: &MlpModel) -> Result<()> {
        for i in 0..self.len() {
            let y = self.labels[i];
            let correct = model.predict(self.originals.row(i)) == y;
            let adv = self.adversarials.row(i);
            let loss = model.loss(adv, y)?;
            let o = &mut self.outcomes[i];
            o.originally_correct = correct;
            o.local_success = correct && model.predict(adv) != y;
            o.loss = loss;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_header(BATCH_MAGIC, BATCH_VERSION);
        e.f64(self.epsilon);
        e.usize(self.len());
        e.usize(self.originals.cols());
        e.f64s(self.originals.data());
        e.f64s(self.adversarials.data());
        for (l, o) in self.labels.iter().zip(&self.outcomes) {
            e.usize(*l);
            e.u8(o.originally_correct as u8 | (o.local_success as u8) << 1);
            e.f64(o.loss);
            e.usize(o.restart);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::with_header(bytes, BATCH_MAGIC, BATCH_VERSION)?;
        let epsilon = d.f64()?;
        let n = d.len(8)?;
        let dim = d.usize()?;
        let size = n.saturating_mul(dim);
        let originals = d.f64s(size)?;
        let adversarials = d.f64s(size)?;
        let mut labels = Vec::with_capacity(n);
        let mut outcomes = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(d.usize()?);
            let flags = d.u8()?;
            outcomes.push(PointOutcome {
                originally_correct: flags & 1 != 0,
                local_success: flags & 2 != 0,
                loss: d.f64()?,
                restart: d.usize()?,
            });
        }
        d.finish()?;
        let fmt = |e: Error| Error::Format(e.to_string());
        Self::new(
            Matrix::new(n, dim, originals).map_err(fmt)?,
            labels,
            Matrix::new(n, dim, adversarials).map_err(fmt)?,
            epsilon,
            outcomes,
        )
        .map_err(fmt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = codec::read_file(path)?;
        codec::in_file(path, Self::from_bytes(&bytes))
    }

    /// Per-point CSV: index, label, flags, restart, loss and L∞ distortion.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("index,label,originally_correct,local_success,restart,loss,linf_distortion\n");
        for (i, o) in self.outcomes.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{},{}",
                self.labels[i],
                o.originally_correct as u8,
                o.local_success as u8,
                o.restart,
                o.loss,
                self.linf_distortion(i)
            );
        }
        s
    }
}
