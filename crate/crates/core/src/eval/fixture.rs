use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::stats::spearman;
use crate::error::{Error, Result};
use crate::zest::{rank_candidates, DistanceMetric};

/// Published values carry 3 decimals, so two candidates within half a unit of the last
/// digit cannot be told apart.
pub const FIXTURE_TIE_TOLERANCE: f64 = 0.0005;

/// Slack added to the rounding tolerance when comparing published distances.
const FLOAT_SLACK: f64 = 1e-9;

const BUNDLED_DISTANCES: [(usize, &str); 3] = [
    (128, include_str!("../../fixtures/distances_n128.csv")),
    (64, include_str!("../../fixtures/distances_n64.csv")),
    (32, include_str!("../../fixtures/distances_n32.csv")),
];
const BUNDLED_CLOSEST: &str = include_str!("../../fixtures/closest_n128.csv");

/// Reference-set size the published closest-pair distances were measured at.
pub const CLOSEST_PAIRS_N: usize = 128;

/// Symmetric distance matrix between named models, diagonal absent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistanceTable {
    values: BTreeMap<(String, String), f64>,
}

impl DistanceTable {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        self.values.get(&(a.to_string(), b.to_string())).copied()
    }

    /// Sorted model ids.
    pub fn models(&self) -> Vec<String> {
        let m: BTreeSet<&String> = self.values.keys().flat_map(|(a, b)| [a, b]).collect();
        m.into_iter().cloned().collect()
    }

    /// Distances from `target` to every other model, ordered by model id.
    pub fn row(&self, target: &str) -> Vec<(String, f64)> {
        self.values
            .iter()
            .filter(|((a, _), _)| a == target)
            .map(|((_, b), &d)| (b.clone(), d))
            .collect()
    }

    fn validate(&self, what: &str) -> Result<()> {
        let models = self.models();
        for a in &models {
            for b in &models {
                match (a == b, self.get(a, b), self.get(b, a)) {
                    (true, None, _) => {}
                    (true, Some(_), _) => {
                        return Err(Error::Format(format!("{what}: diagonal entry for {a}")));
                    }
                    (false, Some(x), Some(y)) if x == y => {}
                    (false, Some(x), Some(y)) => {
                        return Err(Error::Format(format!(
                            "{what}: asymmetric entry {a}/{b}: {x} vs {y}"
                        )));
                    }
                    _ => {
                        return Err(Error::Format(format!("{what}: missing entry {a}/{b}")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosestPair {
    pub metric: DistanceMetric,
    pub target: String,
    pub closest: String,
    pub distance: f64,
}

/// Transcribed published distance matrices (keyed by reference-set size and metric) and
/// the published closest-model table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PaperFixture {
    tables: BTreeMap<(usize, DistanceMetric), DistanceTable>,
    closest: Vec<ClosestPair>,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64(s: &str, what: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("{what} line {line}: bad number {s:?}")))
}

fn fields<'a>(line: &'a str, n: usize, what: &str, no: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split(',').map(str::trim).collect();
    if f.len() != n {
        return Err(Error::Format(format!(
            "{what} line {no}: expected {n} fields, got {}",
            f.len()
        )));
    }
    Ok(f)
}

impl PaperFixture {
    /// The fixture files compiled into the crate.
    pub fn bundled() -> Result<Self> {
        let mut fx = Self::default();
        for (n, text) in BUNDLED_DISTANCES {
            fx.add_distances(n, text)?;
        }
        fx.set_closest(BUNDLED_CLOSEST)?;
        Ok(fx)
    }

    /// Reads `distances_n{128,64,32}.csv` and `closest_n128.csv` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let mut fx = Self::default();
        for n in [128, 64, 32] {
            fx.add_distances(n, &read(&format!("distances_n{n}.csv"))?)?;
        }
        fx.set_closest(&read("closest_n128.csv")?)?;
        Ok(fx)
    }

    /// Adds one `metric,model_a,model_b,distance` file for reference-set size `n`.
    pub fn add_distances(&mut self, n: usize, text: &str) -> Result<()> {
        let what = format!("distances N={n}");
        let mut lines = data_lines(text);
        match lines.next() {
            Some((_, "metric,model_a,model_b,distance")) => {}
            _ => return Err(Error::Format(format!("{what}: missing header"))),
        }
        let mut added: BTreeMap<DistanceMetric, DistanceTable> = BTreeMap::new();
        for (no, line) in lines {
            let f = fields(line, 4, &what, no)?;
            let metric: DistanceMetric = f[0]
                .parse()
                .map_err(|e: Error| Error::Format(format!("{what} line {no}: {e}")))?;
            let d = parse_f64(f[3], &what, no)?;
            let table = added.entry(metric).or_default();
            if table
                .values
                .insert((f[1].to_string(), f[2].to_string()), d)
                .is_some()
            {
                return Err(Error::Format(format!("{what} line {no}: duplicate pair")));
            }
        }
        for (metric, table) in added {
            table.validate(&format!("{what} {metric}"))?;
            self.tables.insert((n, metric), table);
        }
        Ok(())
    }

    /// Replaces the closest-pair table from `metric,target,closest,distance` text.
    pub fn set_closest(&mut self, text: &str) -> Result<()> {
        let what = "closest pairs";
        let mut lines = data_lines(text);
        match lines.next() {
            Some((_, "metric,target,closest,distance")) => {}
            _ => return Err(Error::Format(format!("{what}: missing header"))),
        }
        self.closest = lines
            .map(|(no, line)| {
                let f = fields(line, 4, what, no)?;
                Ok(ClosestPair {
                    metric: f[0]
                        .parse()
                        .map_err(|e: Error| Error::Format(format!("{what} line {no}: {e}")))?,
                    target: f[1].to_string(),
                    closest: f[2].to_string(),
                    distance: parse_f64(f[3], what, no)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn table(&self, n: usize, metric: DistanceMetric) -> Option<&DistanceTable> {
        self.tables.get(&(n, metric))
    }

    /// Reference-set sizes present, ascending.
    pub fn sizes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.tables.keys().map(|(n, _)| *n).collect();
        v.dedup();
        v
    }

    pub fn closest_pairs(&self, metric: DistanceMetric) -> Vec<&ClosestPair> {
        self.closest.iter().filter(|c| c.metric == metric).collect()
    }
}

/// Architecture family of a model id: its leading alphabetic run (`vgg13_bn` → `vgg`).
pub fn model_family(id: &str) -> &str {
    let end = id
        .char_indices()
        .find(|(_, c)| !c.is_ascii_alphabetic())
        .map_or(id.len(), |(i, _)| i);
    &id[..end]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayRow {
    pub target: String,
    pub expected: String,
    pub expected_distance: f64,
    /// Argmin over the fixture row; within a rounding tie the published choice is kept.
    pub selected: String,
    pub selected_distance: f64,
    /// Candidates within the rounding tolerance of the minimum, when more than one.
    pub tied: Vec<String>,
    pub pair_match: bool,
    /// Fixture distance of the published pair agrees with the published closest distance;
    /// `None` when replaying a size other than the one those distances were measured at.
    pub distance_match: Option<bool>,
    pub same_family: bool,
}

impl ReplayRow {
    pub fn matched(&self) -> bool {
        self.pair_match && self.distance_match.unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub metric: DistanceMetric,
    pub n: usize,
    pub rows: Vec<ReplayRow>,
}

impl ReplayReport {
    pub fn matches(&self) -> usize {
        self.rows.iter().filter(|r| r.matched()).count()
    }

    pub fn family_matches(&self) -> usize {
        self.rows.iter().filter(|r| r.same_family).count()
    }

    pub fn ties(&self) -> usize {
        self.rows.iter().filter(|r| !r.tied.is_empty()).count()
    }

    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.matches() == self.rows.len()
    }

    /// Plain-text table, one line per target plus a totals line.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<14} {:<14} {:>9} {:<14} {:>9}  result\n",
            "target", "published", "dist", "replayed", "dist"
        );
        for r in &self.rows {
            let mut status = if r.matched() { "ok" } else { "MISMATCH" }.to_string();
            if !r.tied.is_empty() {
                let _ = write!(status, " (tie: {})", r.tied.join("/"));
            }
            let _ = writeln!(
                s,
                "{:<14} {:<14} {:>9.4} {:<14} {:>9.4}  {status}",
                r.target, r.expected, r.expected_distance, r.selected, r.selected_distance
            );
        }
        let _ = writeln!(
            s,
            "{} N={}: {}/{} closest-pair matches, {} ties flagged, {}/{} same-family",
            self.metric,
            self.n,
            self.matches(),
            self.rows.len(),
            self.ties(),
            self.family_matches(),
            self.rows.len()
        );
        s
    }
}

/// Runs surrogate selection over the published matrix for size `n` and compares the
/// result with the published closest pairs for `metric`.
pub fn replay_paper_fixture(
    fixture: &PaperFixture,
    metric: DistanceMetric,
    n: usize,
) -> Result<ReplayReport> {
    let table = fixture.table(n, metric).ok_or_else(|| {
        Error::Config(format!("fixture has no {metric} distances for N={n}"))
    })?;
    let pairs = fixture.closest_pairs(metric);
    if pairs.is_empty() {
        return Err(Error::Config(format!("fixture has no {metric} closest pairs")));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let candidates = table.row(&p.target);
        if candidates.is_empty() {
            return Err(Error::Config(format!(
                "target {} is absent from the N={n} {metric} matrix",
                p.target
            )));
        }
        let fixture_d = table.get(&p.target, &p.closest);
        let report = rank_candidates(
            &p.target,
            metric,
            &format!("fixture-n{n}"),
            candidates,
            FIXTURE_TIE_TOLERANCE,
        )?;
        let selected = if report.tied.contains(&p.closest) {
            p.closest.clone()
        } else {
            report.selected.clone()
        };
        let selected_distance = report
            .distance_to(&selected)
            .expect("selected id comes from the row");
        rows.push(ReplayRow {
            target: p.target.clone(),
            expected: p.closest.clone(),
            expected_distance: p.distance,
            pair_match: selected == p.closest,
            distance_match: (n == CLOSEST_PAIRS_N).then(|| {
                fixture_d
                    .is_some_and(|d| (d - p.distance).abs() <= FIXTURE_TIE_TOLERANCE + FLOAT_SLACK)
            }),
            same_family: model_family(&p.target) == model_family(&selected),
            selected,
            selected_distance,
            tied: report.tied,
        });
    }
    Ok(ReplayReport { metric, n, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRow {
    pub metric: DistanceMetric,
    pub victim: String,
    /// Rank agreement of the victim's distance ordering at the largest size with each
    /// smaller size, keyed by size; `None` when undefined (constant ordering).
    pub agreement: BTreeMap<usize, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub reference_size: usize,
    pub rows: Vec<StabilityRow>,
}

impl StabilityReport {
    /// Victims whose agreement with size `a` is at least their agreement with size `b`.
    pub fn count_at_least(&self, metric: DistanceMetric, a: usize, b: usize) -> (usize, usize) {
        let rows: Vec<&StabilityRow> = self.rows.iter().filter(|r| r.metric == metric).collect();
        let hits = rows
            .iter()
            .filter(|r| match (r.agreement.get(&a), r.agreement.get(&b)) {
                (Some(Some(x)), Some(Some(y))) => x >= y,
                _ => false,
            })
            .count();
        (hits, rows.len())
    }

    pub fn to_csv(&self) -> String {
        let sizes: Vec<usize> = self
            .rows
            .first()
            .map(|r| r.agreement.keys().copied().collect())
            .unwrap_or_default();
        let mut s = String::from("metric,victim");
        for n in &sizes {
            let _ = write!(s, ",agreement_n{}_n{n}", self.reference_size);
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.metric, r.victim);
            for n in &sizes {
                match r.agreement.get(n).copied().flatten() {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Spearman agreement between two distance orderings over the same candidate ids.
pub fn rank_agreement(a: &[(String, f64)], b: &[(String, f64)]) -> Result<f64> {
    let lookup: BTreeMap<&str, f64> = b.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let mut xs = Vec::with_capacity(a.len());
    let mut ys = Vec::with_capacity(a.len());
    for (k, v) in a {
        let w = lookup
            .get(k.as_str())
            .ok_or_else(|| Error::Config(format!("candidate {k} missing from comparison")))?;
        xs.push(*v);
        ys.push(*w);
    }
    spearman(&xs, &ys)
}

/// Per-victim rank agreement between the largest reference-set size and every smaller
/// one, for each metric present at all sizes.
pub fn compare_n_stability(fixture: &PaperFixture) -> Result<StabilityReport> {
    let sizes = fixture.sizes();
    let Some(&reference_size) = sizes.last() else {
        return Err(Error::Empty("fixture holds no distance matrices".into()));
    };
    let mut rows = Vec::new();
    for metric in DistanceMetric::ALL {
        let Some(base) = fixture.table(reference_size, metric) else {
            continue;
        };
        let others: Vec<(usize, &DistanceTable)> = sizes
            .iter()
            .rev()
            .skip(1)
            .filter_map(|&n| fixture.table(n, metric).map(|t| (n, t)))
            .collect();
        for victim in base.models() {
            let reference = base.row(&victim);
            let agreement = others
                .iter()
                .map(|(n, t)| (*n, rank_agreement(&reference, &t.row(&victim)).ok()))
                .collect();
            rows.push(StabilityRow {
                metric,
                victim,
                agreement,
            });
        }
    }
    Ok(StabilityReport {
        reference_size,
        rows,
    })
}
