use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::transfer::{CorrelationRecord, TransferMatrix};
use crate::attack::{transfer_eval, AttackConfig};
use crate::codec::{self, sha256_hex};
use crate::error::{Error, Result};
use crate::lime::{compute_signature, make_plan, make_plan_verified, LimeConfig, SegmentGrid, Signature};
use crate::nn::{train, Dataset, MlpModel, SyntheticSpec, TrainConfig};
use crate::oracle::{LedgerSnapshot, LocalOracle, QueryOracle, RemoteEndpoint, RemoteOracle};
use crate::seed::derive_seed;
use crate::zest::{select_among, DistanceMetric, DistanceReport, SignatureStore};

fn default_test_fraction() -> f64 {
    0.3
}

/// Where the campaign's labelled data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
    },
    Glyphs {
        classes: usize,
        side: usize,
        per_class: usize,
        strokes: usize,
        noise: f64,
    },
    /// `label,x0,x1,...` file with features in `[0, 1]`; relative paths resolve against
    /// the config file's directory.
    Csv {
        path: PathBuf,
        #[serde(default)]
        class_count: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBlock {
    #[serde(flatten)]
    pub source: DataSource,
    /// Share of the data held out for reference points and attacks.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

/// One locally trained model. Unset training fields use [`TrainConfig::default`]; an unset
/// seed is derived from the master seed and the model id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ModelSpec {
    pub fn train_config(&self, master_seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            momentum: self.momentum.unwrap_or(d.momentum),
            rng_seed: self
                .seed
                .unwrap_or_else(|| derive_seed(master_seed, &["train", &self.id])),
            hidden: self.hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VictimSpec {
    /// Trained inside the campaign on the same training split as the portfolio.
    Trained(ModelSpec),
    /// A saved model file, queried through a local oracle.
    Model { id: String, path: PathBuf },
    /// A prediction server reached over HTTP.
    Remote {
        id: String,
        url: String,
        #[serde(default)]
        timeout_secs: Option<u64>,
        #[serde(default)]
        max_batch_rows: Option<usize>,
    },
}

impl VictimSpec {
    pub fn id(&self) -> &str {
        match self {
            VictimSpec::Trained(m) => &m.id,
            VictimSpec::Model { id, .. } | VictimSpec::Remote { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    Contiguous { segments: usize },
    Patches {
        height: usize,
        width: usize,
        patch_height: usize,
        patch_width: usize,
    },
}

impl GridSpec {
    pub fn build_for(&self, input_dim: usize) -> Result<SegmentGrid> {
        match *self {
            GridSpec::Contiguous { segments } => SegmentGrid::contiguous(input_dim, segments),
            GridSpec::Patches {
                height,
                width,
                patch_height,
                patch_width,
            } => {
                let grid = SegmentGrid::patches(height, width, patch_height, patch_width)?;
                if grid.input_dim() != input_dim {
                    return Err(Error::Shape {
                        context: "segment grid vs dataset width",
                        expected: input_dim,
                        actual: grid.input_dim(),
                    });
                }
                Ok(grid)
            }
        }
    }
}

fn default_n_points() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimeBlock {
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    /// Sample reference points only among test points every portfolio model gets right.
    #[serde(default)]
    pub verified_references: bool,
    pub grid: GridSpec,
    #[serde(flatten)]
    pub config: LimeConfig,
}

fn default_epsilons() -> Vec<f64> {
    vec![0.1]
}
fn default_step_fraction() -> f64 {
    0.2
}
fn default_steps() -> usize {
    40
}
fn default_restarts() -> usize {
    5
}
fn default_attack_points() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackBlock {
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    /// PGD step size as a fraction of ε.
    #[serde(default = "default_step_fraction")]
    pub step_fraction: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub quantize_8bit: bool,
    /// Test points attacked per surrogate (all test points when larger).
    #[serde(default = "default_attack_points")]
    pub attack_points: usize,
}

impl Default for AttackBlock {
    fn default() -> Self {
        Self {
            epsilons: default_epsilons(),
            step_fraction: default_step_fraction(),
            steps: default_steps(),
            restarts: default_restarts(),
            quantize_8bit: false,
            attack_points: default_attack_points(),
        }
    }
}

fn default_metrics() -> Vec<DistanceMetric> {
    vec![DistanceMetric::Cosine, DistanceMetric::Linf]
}

/// Declarative description of one end-to-end run.
///
/// The output directory is not part of the config hash, so the same experiment written
/// to two places produces byte-identical artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub master_seed: u64,
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetBlock,
    pub portfolio: Vec<ModelSpec>,
    pub victim: VictimSpec,
    pub lime: LimeBlock,
    #[serde(default)]
    pub attack: AttackBlock,
    /// Metrics for distances and correlations; the first one drives surrogate selection.
    #[serde(default = "default_metrics")]
    pub metrics: Vec<DistanceMetric>,
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("campaign config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; relative data and model paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Csv { path: p, .. } = &mut cfg.dataset.source {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let VictimSpec::Model { path: p, .. } = &mut cfg.victim {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.portfolio.is_empty() {
            return Err(Error::Config("portfolio must list at least one model".into()));
        }
        let mut ids = BTreeSet::new();
        for m in &self.portfolio {
            if m.id.is_empty() || !ids.insert(m.id.as_str()) {
                return Err(Error::Config(format!("duplicate or empty model id {:?}", m.id)));
            }
        }
        if ids.contains(self.victim.id()) {
            return Err(Error::Config(format!(
                "victim id {:?} collides with a portfolio id",
                self.victim.id()
            )));
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("metrics must not be empty".into()));
        }
        if self.attack.epsilons.is_empty() {
            return Err(Error::Config("attack.epsilons must not be empty".into()));
        }
        for &eps in &self.attack.epsilons {
            self.attack_config(eps).validate()?;
        }
        if !(0.0 < self.dataset.test_fraction && self.dataset.test_fraction < 1.0) {
            return Err(Error::Config("dataset.test_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Hex digest of the normalised config (defaults filled in, output directory excluded).
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        sha256_hex(json.as_bytes())[..16].to_string()
    }

    pub fn attack_config(&self, epsilon: f64) -> AttackConfig {
        AttackConfig {
            epsilon,
            step_size: epsilon * self.attack.step_fraction,
            steps: self.attack.steps,
            restarts: self.attack.restarts,
            rng_seed: derive_seed(self.master_seed, &["attack"]),
            quantize_8bit: self.attack.quantize_8bit,
            random_init: true,
        }
    }
}

/// Transfer of one proxy's adversarial batch onto the victim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimTransfer {
    pub epsilon: f64,
    pub proxy_id: String,
    pub success_rate: f64,
    pub success_count: usize,
    pub eligible: usize,
    pub raw_rate: f64,
    pub local_success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignReport {
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub victim_id: String,
    /// Selected surrogate per metric.
    pub selected: BTreeMap<DistanceMetric, String>,
    pub distances: Vec<DistanceReport>,
    pub victim_transfer: Vec<VictimTransfer>,
    pub transfer_matrices: Vec<TransferMatrix>,
    pub correlations: Vec<CorrelationRecord>,
    pub victim_queries: LedgerSnapshot,
    pub artifacts: Vec<String>,
}

impl CampaignReport {
    pub fn correlation(&self, metric: DistanceMetric, epsilon: f64) -> Option<&CorrelationRecord> {
        self.correlations
            .iter()
            .find(|c| c.metric == metric && c.epsilon == epsilon)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_stage: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    completed_stages: &'a [&'static str],
    artifacts: &'a [String],
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    selected: BTreeMap<String, String>,
}

const STAGES: [&str; 9] = [
    "dataset",
    "portfolio",
    "plan",
    "signatures",
    "victim-signature",
    "distances",
    "attack",
    "correlation",
    "report",
];

struct Writer {
    dir: PathBuf,
    hash: String,
    artifacts: Vec<String>,
}

impl Writer {
    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        codec::write_atomic(&path, bytes)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    /// CSV whose first line records the config hash.
    fn csv(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!("# config_hash: {}\n{body}", self.hash);
        self.bytes(name, text.as_bytes())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Format(format!("{name}: {e}")))?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    fn manifest(&mut self, status: &str, failure: Option<(&'static str, &Error)>, done: &[&'static str], selected: BTreeMap<String, String>) -> Result<()> {
        let mut artifacts = self.artifacts.clone();
        artifacts.sort();
        let m = Manifest {
            config_hash: &self.hash,
            status,
            failed_stage: failure.map(|(s, _)| s),
            error: failure.map(|(_, e)| e.to_string()),
            completed_stages: done,
            artifacts: &artifacts,
            selected,
        };
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serialises");
        text.push('\n');
        codec::write_atomic(&self.dir.join("manifest.json"), text.as_bytes())
    }
}

fn load_dataset(block: &DatasetBlock, seed: u64) -> Result<Dataset> {
    let spec = match &block.source {
        DataSource::Blobs {
            classes,
            dim,
            per_class,
            spread,
        } => SyntheticSpec::Blobs {
            classes: *classes,
            dim: *dim,
            per_class: *per_class,
            spread: *spread,
        },
        DataSource::Glyphs {
            classes,
            side,
            per_class,
            strokes,
            noise,
        } => SyntheticSpec::Glyphs {
            classes: *classes,
            side: *side,
            per_class: *per_class,
            strokes: *strokes,
            noise: *noise,
        },
        DataSource::Csv { path, class_count } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return codec::in_file(path, Dataset::from_csv(&text, *class_count));
        }
    };
    spec.generate(seed)
}

fn fmt_eps(eps: f64) -> String {
    format!("{eps}")
}

/// Runs the whole pipeline described by `cfg` and writes its artifacts under `out`:
///
/// train portfolio → shared plan → proxy signatures → victim signature → distances and
/// selection → PGD on every proxy → transfer onto the victim → correlations.
///
/// On failure the artifacts written so far are kept and `manifest.json` names the failed
/// stage; the returned error is [`Error::Partial`].
pub fn run_campaign(cfg: &CampaignConfig, out: &Path) -> Result<CampaignReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut w = Writer {
        dir: out.to_path_buf(),
        hash: cfg.config_hash(),
        artifacts: Vec::new(),
    };
    let mut done: Vec<&'static str> = Vec::new();
    let mut selected_names = BTreeMap::new();
    match run_stages(cfg, &mut w, &mut done, &mut selected_names) {
        Ok(report) => {
            w.manifest("complete", None, &done, selected_names)?;
            Ok(report)
        }
        Err(e) => {
            let stage = STAGES[done.len().min(STAGES.len() - 1)];
            if let Err(me) = w.manifest("failed", Some((stage, &e)), &done, selected_names) {
                log::error!("could not write failure manifest: {me}");
            }
            Err(Error::Partial {
                stage,
                completed: done.len(),
                total: STAGES.len(),
                source: Box::new(e),
            })
        }
    }
}

fn run_stages(
    cfg: &CampaignConfig,
    w: &mut Writer,
    done: &mut Vec<&'static str>,
    selected_names: &mut BTreeMap<String, String>,
) -> Result<CampaignReport> {
    let master = cfg.master_seed;
    w.json("config.json", cfg)?;

    // dataset
    let data = load_dataset(&cfg.dataset, derive_seed(master, &["dataset"]))?;
    let (test, train_set) = data.split(cfg.dataset.test_fraction, derive_seed(master, &["split"]))?;
    if test.is_empty() || train_set.is_empty() {
        return Err(Error::Config("train/test split left an empty side".into()));
    }
    done.push("dataset");

    // portfolio (and a trained victim)
    let mut specs: Vec<&ModelSpec> = cfg.portfolio.iter().collect();
    if let VictimSpec::Trained(v) = &cfg.victim {
        specs.push(v);
    }
    let trained: Vec<(MlpModel, f64)> = specs
        .par_iter()
        .map(|s| {
            let (m, report) = train(&train_set, &s.train_config(master), &s.id)?;
            for warning in &report.warnings {
                log::warn!("{}: {warning}", s.id);
            }
            Ok((m, report.train_accuracy))
        })
        .collect::<Result<_>>()?;
    let mut summary = String::from("model_id,role,hidden,train_accuracy,test_accuracy\n");
    let mut models: Vec<Arc<MlpModel>> = Vec::new();
    for (m, acc) in trained {
        let role = if m.model_id() == cfg.victim.id() { "victim" } else { "proxy" };
        let hidden: Vec<String> = m.hidden_widths().iter().map(|h| h.to_string()).collect();
        let _ = writeln!(
            summary,
            "{},{role},{},{acc},{}",
            m.model_id(),
            hidden.join("x"),
            crate::nn::accuracy(&m, &test)
        );
        w.bytes(&format!("models/{}.mlp", m.model_id()), &m.to_bytes())?;
        models.push(Arc::new(m));
    }
    w.csv("models.csv", &summary)?;
    let victim_local: Option<Arc<MlpModel>> = match &cfg.victim {
        VictimSpec::Trained(_) => models.pop(),
        VictimSpec::Model { id, path } => {
            let mut m = MlpModel::load(path)?;
            m.set_model_id(id.clone());
            Some(Arc::new(m))
        }
        VictimSpec::Remote { .. } => None,
    };
    let proxies = models;
    done.push("portfolio");

    // plan
    let grid = cfg.lime.grid.build_for(test.dim())?;
    let plan_seed = derive_seed(master, &["plan"]);
    let plan = if cfg.lime.verified_references {
        let refs: Vec<&MlpModel> = proxies.iter().map(|m| m.as_ref()).collect();
        make_plan_verified(&test, cfg.lime.n_points, grid, cfg.lime.config.clone(), plan_seed, &refs)?
    } else {
        make_plan(&test, cfg.lime.n_points, grid, cfg.lime.config.clone(), plan_seed)?
    };
    w.bytes("plan.plan", &plan.to_bytes())?;
    done.push("plan");

    // proxy signatures
    let store = SignatureStore::open(w.dir.join("signatures"))?;
    let proxy_sigs: Vec<Signature> = proxies
        .par_iter()
        .map(|m| {
            let mut sig = compute_signature(&LocalOracle::new(m.clone()), &plan)?;
            sig.set_model_id(m.model_id());
            Ok(sig)
        })
        .collect::<Result<_>>()?;
    for s in &proxy_sigs {
        store.put(s)?;
    }
    done.push("signatures");

    // victim signature
    let victim: Box<dyn QueryOracle> = match (&cfg.victim, &victim_local) {
        (_, Some(m)) => Box::new(LocalOracle::new(m.clone())),
        (VictimSpec::Remote { url, timeout_secs, max_batch_rows, .. }, None) => {
            let mut ep = RemoteEndpoint::new(url.clone());
            if let Some(t) = timeout_secs {
                ep.timeout = Duration::from_secs(*t);
            }
            if let Some(rows) = max_batch_rows {
                ep.max_batch_rows = *rows;
            }
            Box::new(RemoteOracle::connect(ep)?)
        }
        _ => unreachable!("local victims are loaded above"),
    };
    if victim.input_dim() != test.dim() {
        return Err(Error::Shape {
            context: "victim input width",
            expected: test.dim(),
            actual: victim.input_dim(),
        });
    }
    let victim_id = cfg.victim.id().to_string();
    let mut victim_sig = compute_signature(victim.as_ref(), &plan)?;
    victim_sig.set_model_id(victim_id.clone());
    store.put(&victim_sig)?;
    let sig_queries = victim.ledger().snapshot();
    log::info!("victim signature: {sig_queries}");
    w.artifacts.push("signatures/".into());
    done.push("victim-signature");

    // distances and selection
    let mut distance_csv = String::from("victim_id,proxy_id,metric,distance,rank\n");
    let mut selection_csv = String::from("metric,selected,distance,tied\n");
    let mut reports = Vec::new();
    let mut selected = BTreeMap::new();
    for &metric in &cfg.metrics {
        let report = select_among(&victim_sig, &proxy_sigs, metric)?;
        report.append_csv_rows(&mut distance_csv);
        let _ = writeln!(
            selection_csv,
            "{metric},{},{},{}",
            report.selected,
            report.selected_distance(),
            report.tied.join(" ")
        );
        selected.insert(metric, report.selected.clone());
        selected_names.insert(metric.to_string(), report.selected.clone());
        reports.push(report);
    }
    w.csv("distances.csv", &distance_csv)?;
    w.csv("selection.csv", &selection_csv)?;
    done.push("distances");

    // attacks and transfer
    let ids: BTreeMap<&str, usize> = proxies
        .iter()
        .enumerate()
        .map(|(i, m)| (m.model_id(), i))
        .collect();
    let attack_set = if test.len() > cfg.attack.attack_points {
        let picked = rand::seq::index::sample(
            &mut crate::seed::rng(derive_seed(master, &["attack-points"])),
            test.len(),
            cfg.attack.attack_points,
        )
        .into_vec();
        test.subset(&picked)
    } else {
        test.clone()
    };
    let primary = selected[&cfg.metrics[0]].clone();
    let mut local_models: Vec<Arc<MlpModel>> = proxies.clone();
    if let Some(v) = &victim_local {
        local_models.push(v.clone());
    }
    let mut matrices = Vec::new();
    let mut victim_rows = Vec::new();
    let mut matrix_csv = format!("{}\n", TransferMatrix::CSV_HEADER);
    let mut victim_csv = String::from(
        "epsilon,proxy_id,success_rate,success_count,eligible,raw_rate,local_success_rate\n",
    );
    for &eps in &cfg.attack.epsilons {
        let acfg = cfg.attack_config(eps);
        let (matrix, batches) = TransferMatrix::compute(&local_models, &attack_set, &acfg)?;
        matrix.append_csv_rows(&mut matrix_csv);
        for (m, batch) in proxies.iter().zip(&batches) {
            let t = transfer_eval(victim.as_ref(), batch)?;
            let row = VictimTransfer {
                epsilon: eps,
                proxy_id: m.model_id().to_string(),
                success_rate: t.success_rate,
                success_count: t.success_count,
                eligible: t.eligible,
                raw_rate: t.raw_rate,
                local_success_rate: batch.local_success_rate(),
            };
            let _ = writeln!(
                victim_csv,
                "{eps},{},{},{},{},{},{}",
                row.proxy_id,
                row.success_rate,
                row.success_count,
                row.eligible,
                row.raw_rate,
                row.local_success_rate
            );
            victim_rows.push(row);
        }
        let chosen = &batches[ids[primary.as_str()]];
        let tag = fmt_eps(eps);
        w.bytes(&format!("adversarial/{primary}_eps{tag}.adv"), &chosen.to_bytes())?;
        w.csv(&format!("adversarial/{primary}_eps{tag}.csv"), &chosen.summary_csv())?;
        matrices.push(matrix);
    }
    w.csv("transfer_matrix.csv", &matrix_csv)?;
    w.csv("victim_transfer.csv", &victim_csv)?;
    done.push("attack");

    // correlations
    let mut correlations = Vec::new();
    let mut corr_csv = format!("{}\n", CorrelationRecord::CSV_HEADER);
    let mut plot_csv = String::from("metric,epsilon,proxy_id,distance,transfer_rate\n");
    for report in &reports {
        for &eps in &cfg.attack.epsilons {
            let pairs: Vec<(f64, f64)> = victim_rows
                .iter()
                .filter(|r| r.epsilon == eps)
                .map(|r| {
                    let d = report.distance_to(&r.proxy_id).expect("every proxy has a distance");
                    let _ = writeln!(
                        plot_csv,
                        "{},{eps},{},{d},{}",
                        report.metric, r.proxy_id, r.success_rate
                    );
                    (d, r.success_rate)
                })
                .collect();
            let rec = CorrelationRecord::from_pairs(&victim_id, report.metric, plan.n_points(), eps, &pairs)?;
            let _ = writeln!(corr_csv, "{}", rec.csv_row());
            correlations.push(rec);
        }
    }
    w.csv("correlations.csv", &corr_csv)?;
    w.csv("plot_data.csv", &plot_csv)?;
    done.push("correlation");

    let victim_queries = victim.ledger().snapshot();
    #[derive(Serialize)]
    struct LedgerFile<'a> {
        config_hash: &'a str,
        victim_id: &'a str,
        signature_phase: LedgerSnapshot,
        total: LedgerSnapshot,
    }
    let hash = w.hash.clone();
    w.json(
        "ledger.json",
        &LedgerFile {
            config_hash: &hash,
            victim_id: &victim_id,
            signature_phase: sig_queries,
            total: victim_queries,
        },
    )?;
    done.push("report");

    let mut artifacts = w.artifacts.clone();
    artifacts.push("manifest.json".into());
    artifacts.sort();
    Ok(CampaignReport {
        config_hash: hash,
        output_dir: w.dir.clone(),
        victim_id,
        selected,
        distances: reports,
        victim_transfer: victim_rows,
        transfer_matrices: matrices,
        correlations,
        victim_queries,
        artifacts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
master_seed = 3

[dataset]
kind = "blobs"
classes = 3
dim = 4
per_class = 30
spread = 0.08

[[portfolio]]
id = "a"
hidden = [8]
epochs = 5

[victim]
kind = "trained"
id = "v"
hidden = [8]
epochs = 5

[lime]
n_points = 4
perturbations = 8
grid = { kind = "contiguous", segments = 2 }
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = CampaignConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.attack, AttackBlock::default());
        assert_eq!(cfg.metrics, default_metrics());
        assert_eq!(cfg.dataset.test_fraction, 0.3);
        assert_eq!(cfg.lime.config.perturbations, 8);
        assert_eq!(cfg.lime.config.ridge, 1.0);
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = CampaignConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.config_hash(), b.config_hash());
        b.master_seed = 4;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn rejects_victim_id_collision_and_unknown_keys() {
        let clash = MINIMAL.replace("id = \"v\"", "id = \"a\"");
        assert!(matches!(CampaignConfig::from_toml(&clash), Err(Error::Config(_))));
        let unknown = MINIMAL.replace("master_seed = 3", "master_seed = 3\nbogus = 1");
        assert!(CampaignConfig::from_toml(&unknown).is_err());
    }

    #[test]
    fn failure_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        // more reference points than test rows
        let cfg = CampaignConfig::from_toml(&MINIMAL.replace("n_points = 4", "n_points = 500")).unwrap();
        let err = run_campaign(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Partial { stage: "plan", .. }), "{err}");
        let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("\"failed_stage\": \"plan\""));
        assert!(dir.path().join("models.csv").exists());
    }
}
