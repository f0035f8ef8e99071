//! Zest distances between signatures, the signature portfolio and surrogate selection.

mod metric;
mod store;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use metric::{vector_distance, zest_distance, zest_distance_with, DistanceMetric};
pub use store::SignatureStore;

use crate::error::{Error, Result};
use crate::lime::Signature;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceEntry {
    pub proxy_id: String,
    pub distance: f64,
}

/// Distances from one victim to every candidate proxy, sorted ascending (ties by id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub victim_id: String,
    pub metric: DistanceMetric,
    pub fingerprint: String,
    pub entries: Vec<DistanceEntry>,
    /// Ids whose distance is within the tie tolerance of the minimum, when more than one.
    pub tied: Vec<String>,
    /// The selected proxy: the lexicographically smallest id among the minimal ones.
    pub selected: String,
}

impl DistanceReport {
    pub fn is_tie(&self) -> bool {
        self.tied.len() > 1
    }

    pub fn selected_distance(&self) -> f64 {
        self.entries
            .iter()
            .find(|e| e.proxy_id == self.selected)
            .map(|e| e.distance)
            .expect("selected id is one of the entries")
    }

    pub fn distance_to(&self, proxy_id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.proxy_id == proxy_id)
            .map(|e| e.distance)
    }

    /// `victim_id,proxy_id,metric,distance,rank` with full-precision distances.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("victim_id,proxy_id,metric,distance,rank\n");
        self.append_csv_rows(&mut s);
        s
    }

    pub fn append_csv_rows(&self, s: &mut String) {
        for (rank, e) in self.entries.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                self.victim_id,
                e.proxy_id,
                self.metric,
                e.distance,
                rank + 1
            );
        }
    }
}

/// Sorts candidate distances and applies the selection rule: the minimum wins, and any
/// candidates within `tie_tolerance` of it are flagged as tied, the lexicographically
/// smallest id being selected among them.
pub fn rank_candidates(
    victim_id: &str,
    metric: DistanceMetric,
    fingerprint: &str,
    candidates: Vec<(String, f64)>,
    tie_tolerance: f64,
) -> Result<DistanceReport> {
    if candidates.is_empty() {
        return Err(Error::Empty(format!("no proxies to compare with {victim_id}")));
    }
    if let Some((id, d)) = candidates.iter().find(|(_, d)| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::Domain(format!("invalid distance {d} for {id}")));
    }
    let mut entries: Vec<DistanceEntry> = candidates
        .into_iter()
        .map(|(proxy_id, distance)| DistanceEntry { proxy_id, distance })
        .collect();
    entries.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.proxy_id.cmp(&b.proxy_id))
    });
    let best = entries[0].distance;
    let mut tied: Vec<String> = entries
        .iter()
        .filter(|e| e.distance <= best + tie_tolerance)
        .map(|e| e.proxy_id.clone())
        .collect();
    tied.sort();
    let selected = tied[0].clone();
    if tied.len() == 1 {
        tied.clear();
    }
    Ok(DistanceReport {
        victim_id: victim_id.to_string(),
        metric,
        fingerprint: fingerprint.to_string(),
        entries,
        tied,
        selected,
    })
}

/// Distances from `victim` to each candidate; candidates with the victim's own id are
/// skipped.
pub fn select_among(
    victim: &Signature,
    candidates: &[Signature],
    metric: DistanceMetric,
) -> Result<DistanceReport> {
    let mut dists = Vec::with_capacity(candidates.len());
    for c in candidates.iter().filter(|c| c.model_id() != victim.model_id()) {
        dists.push((c.model_id().to_string(), zest_distance(victim, c, metric)?));
    }
    rank_candidates(victim.model_id(), metric, victim.fingerprint(), dists, 0.0)
}

/// Picks the stored proxy closest to `victim` among signatures sharing its plan fingerprint.
pub fn select_surrogate(
    store: &SignatureStore,
    victim: &Signature,
    metric: DistanceMetric,
) -> Result<(String, DistanceReport)> {
    let group = store.load_group(victim.fingerprint())?;
    if group.iter().all(|s| s.model_id() == victim.model_id()) {
        return Err(Error::Empty(format!(
            "store {} has no proxies under fingerprint {}",
            store.dir().display(),
            victim.fingerprint()
        )));
    }
    let report = select_among(victim, &group, metric)?;
    Ok((report.selected.clone(), report))
}
