use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Why a batch of rows was sent to a victim. Only used for the ledger breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPurpose {
    /// Perturbed inputs used to fit LIME models.
    Signature,
    /// The unperturbed reference point of a LIME fit.
    Baseline,
    /// Originals and adversarial points scored during transfer evaluation.
    AttackEval,
    Other,
}

/// Running count of rows sent to an oracle. One row is one billed query, regardless of
/// how rows are batched on the wire.
#[derive(Debug, Default)]
pub struct QueryLedger {
    signature: AtomicU64,
    baseline: AtomicU64,
    attack_eval: AtomicU64,
    other: AtomicU64,
}

impl QueryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, purpose: QueryPurpose, rows: u64) {
        let slot = match purpose {
            QueryPurpose::Signature => &self.signature,
            QueryPurpose::Baseline => &self.baseline,
            QueryPurpose::AttackEval => &self.attack_eval,
            QueryPurpose::Other => &self.other,
        };
        slot.fetch_add(rows, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let signature = self.signature.load(Ordering::Relaxed);
        let baseline = self.baseline.load(Ordering::Relaxed);
        let attack_eval = self.attack_eval.load(Ordering::Relaxed);
        let other = self.other.load(Ordering::Relaxed);
        LedgerSnapshot {
            total: signature + baseline + attack_eval + other,
            signature,
            baseline,
            attack_eval,
            other,
        }
    }

    pub fn total(&self) -> u64 {
        self.snapshot().total
    }
}

/// Point-in-time ledger values. `total` is always the sum of the breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub total: u64,
    pub signature: u64,
    pub baseline: u64,
    pub attack_eval: u64,
    pub other: u64,
}

impl LedgerSnapshot {
    /// Queries spent between `earlier` and `self`.
    pub fn since(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        LedgerSnapshot {
            total: self.total - earlier.total,
            signature: self.signature - earlier.signature,
            baseline: self.baseline - earlier.baseline,
            attack_eval: self.attack_eval - earlier.attack_eval,
            other: self.other - earlier.other,
        }
    }
}

impl fmt::Display for LedgerSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} queries ({} perturbation, {} baseline, {} attack-eval, {} other)",
            self.total, self.signature, self.baseline, self.attack_eval, self.other
        )
    }
}
