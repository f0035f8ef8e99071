use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use zest_core::attack::{pgd, transfer_eval, AdversarialBatch, AttackConfig};
use zest_core::codec::write_atomic;
use zest_core::eval::{compare_n_stability, replay_paper_fixture, run_campaign, CampaignConfig, PaperFixture};
use zest_core::lime::{compute_signature, make_plan, make_plan_verified, LimeConfig, PerturbationPlan, Replacement, SegmentGrid, Signature};
use zest_core::nn::{self, Dataset, MlpModel, SyntheticSpec, TrainConfig};
use zest_core::oracle::{open_oracle, RemoteEndpoint};
use zest_core::zest::{select_surrogate, zest_distance_with, SignatureStore};

use crate::{
    AttackArgs, CampaignArgs, DataKind, DistArgs, Failure, GenDataArgs, PlanArgs, ReplacementArg,
    ReplayArgs, SelectArgs, ServeArgs, SignArgs, TrainArgs, TransferArgs,
};

type CmdResult = Result<(), Failure>;

fn existing(path: &Path) -> Result<&Path, Failure> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::Usage(format!("input path {} does not exist", path.display())))
    }
}

fn existing_oracle(spec: &str) -> Result<(), Failure> {
    if spec.starts_with("http://") || spec.starts_with("https://") {
        Ok(())
    } else {
        existing(Path::new(spec)).map(|_| ())
    }
}

fn out_dir(dir: &Path) -> Result<&Path, Failure> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn endpoint(spec: &str, max_batch_rows: usize) -> RemoteEndpoint {
    RemoteEndpoint {
        max_batch_rows,
        ..RemoteEndpoint::new(spec)
    }
}

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    let spec = match a.kind {
        DataKind::Glyphs => SyntheticSpec::Glyphs {
            classes: a.classes,
            side: a.side,
            per_class: a.per_class,
            strokes: a.strokes,
            noise: a.noise,
        },
        DataKind::Blobs => SyntheticSpec::Blobs {
            classes: a.classes,
            dim: a.dim,
            per_class: a.per_class,
            spread: a.spread,
        },
    };
    let data = spec.generate(a.seed)?;
    let (test, train) = data.split(a.test_fraction, zest_core::seed::derive_seed(a.seed, &["split"]))?;
    let dir = out_dir(&a.out)?;
    train.save_csv(&dir.join("train.csv"))?;
    test.save_csv(&dir.join("test.csv"))?;
    println!(
        "wrote {} training and {} test points ({} features, {} classes) to {}",
        train.len(),
        test.len(),
        data.dim(),
        data.class_count(),
        dir.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let data = Dataset::load_csv(existing(&a.data)?)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        momentum: a.momentum,
        rng_seed: a.seed,
        hidden: a.hidden,
    };
    let (model, report) = nn::train(&data, &cfg, &a.id)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let path = out_dir(&a.out)?.join(format!("{}.mlp", a.id));
    model.save(&path)?;
    println!(
        "{}: train accuracy {:.4}, final loss {:.4} -> {}",
        a.id,
        report.train_accuracy,
        report.final_loss,
        path.display()
    );
    Ok(())
}

pub fn plan(a: PlanArgs) -> CmdResult {
    let data = Dataset::load_csv(existing(&a.data)?)?;
    let grid = match (&a.patches, a.segments) {
        (Some(p), None) if p.len() == 4 => SegmentGrid::patches(p[0], p[1], p[2], p[3])?,
        (Some(_), None) => {
            return Err(Failure::Usage("--patches takes HEIGHT,WIDTH,PATCH_H,PATCH_W".into()))
        }
        (None, Some(s)) => SegmentGrid::contiguous(data.dim(), s)?,
        (None, None) => return Err(Failure::Usage("one of --segments or --patches is required".into())),
        (Some(_), Some(_)) => unreachable!("clap rejects both"),
    };
    let cfg = LimeConfig {
        perturbations: a.perturbations,
        kernel_width: a.kernel_width,
        ridge: a.ridge,
        replacement: match a.replacement {
            ReplacementArg::SegmentMean => Replacement::SegmentMean,
            ReplacementArg::Zeros => Replacement::Zeros,
        },
    };
    let plan = if a.verify_with.is_empty() {
        make_plan(&data, a.n, grid, cfg, a.seed)?
    } else {
        let models = a
            .verify_with
            .iter()
            .map(|p| Ok(MlpModel::load(existing(p)?)?))
            .collect::<Result<Vec<_>, Failure>>()?;
        let refs: Vec<&MlpModel> = models.iter().collect();
        make_plan_verified(&data, a.n, grid, cfg, a.seed, &refs)?
    };
    let path = out_dir(&a.out)?.join(&a.name);
    plan.save(&path)?;
    println!(
        "plan {}: N={} P={} S={} ({} perturbation queries per signature) -> {}",
        plan.fingerprint(),
        plan.n_points(),
        plan.perturbations(),
        plan.segments(),
        plan.perturbation_queries(),
        path.display()
    );
    Ok(())
}

pub fn sign(a: SignArgs) -> CmdResult {
    existing_oracle(&a.oracle)?;
    let plan = PerturbationPlan::load(existing(&a.plan)?)?;
    let oracle = open_oracle(&a.oracle, Some(endpoint(&a.oracle, a.max_batch_rows)))?;
    let result = compute_signature(oracle.as_ref(), &plan);
    let spent = oracle.ledger().snapshot();
    println!("{} perturbation queries", spent.signature);
    println!("ledger: {spent}");
    let mut sig = result?;
    if let Some(id) = a.id {
        sig.set_model_id(id);
    }
    let store = SignatureStore::open(out_dir(&a.out)?)?;
    let path = store.put(&sig)?;
    println!("signature {} ({}) -> {}", sig.model_id(), sig.fingerprint(), path.display());
    Ok(())
}

pub fn dist(a: DistArgs) -> CmdResult {
    let x = Signature::load(existing(&a.a)?)?;
    let y = Signature::load(existing(&a.b)?)?;
    println!("{}", zest_distance_with(&x, &y, a.metric, a.include_intercepts)?);
    Ok(())
}

pub fn select(a: SelectArgs) -> CmdResult {
    let store = SignatureStore::open(existing(&a.store)?)?;
    let victim = Signature::load(existing(&a.victim_sig)?)?;
    let (id, report) = select_surrogate(&store, &victim, a.metric)?;
    for (rank, e) in report.entries.iter().enumerate() {
        println!("{:>3}  {:<24} {:.4}", rank + 1, e.proxy_id, e.distance);
    }
    if report.is_tie() {
        println!("tie between {}", report.tied.join(", "));
    }
    println!("selected {id} ({} {:.4})", a.metric, report.selected_distance());
    if let Some(dir) = a.out {
        write_text(&out_dir(&dir)?.join("selection.csv"), &report.to_csv())?;
    }
    Ok(())
}

pub fn attack(a: AttackArgs) -> CmdResult {
    let model = MlpModel::load(existing(&a.model)?)?;
    let mut data = Dataset::load_csv(existing(&a.data)?)?;
    if let Some(n) = a.points {
        let idx: Vec<usize> = (0..n.min(data.len())).collect();
        data = data.subset(&idx);
    }
    let cfg = AttackConfig {
        epsilon: a.epsilon,
        step_size: a.step_size,
        steps: a.steps,
        restarts: a.restarts,
        rng_seed: a.seed,
        quantize_8bit: a.quantize,
        random_init: true,
    };
    let batch = pgd(&model, &data, &cfg)?;
    let dir = out_dir(&a.out)?;
    batch.save(&dir.join("adversarial.adv"))?;
    write_text(&dir.join("adversarial.csv"), &batch.summary_csv())?;
    println!(
        "{} points, local success {}/{} ({:.4}) at epsilon {} -> {}",
        batch.len(),
        batch.local_success_count(),
        batch.outcomes().iter().filter(|o| o.originally_correct).count(),
        batch.local_success_rate(),
        batch.epsilon(),
        dir.join("adversarial.adv").display()
    );
    Ok(())
}

pub fn transfer(a: TransferArgs) -> CmdResult {
    existing_oracle(&a.victim)?;
    let batch = AdversarialBatch::load(existing(&a.batch)?)?;
    let victim = open_oracle(&a.victim, Some(endpoint(&a.victim, a.max_batch_rows)))?;
    let result = transfer_eval(victim.as_ref(), &batch);
    println!("ledger: {}", victim.ledger().snapshot());
    let t = result?;
    println!(
        "transfer success {}/{} ({:.4}); {} originals already misclassified; raw {}/{} ({:.4})",
        t.success_count,
        t.eligible,
        t.success_rate,
        t.already_misclassified,
        t.raw_success_count,
        t.total,
        t.raw_rate
    );
    if let Some(dir) = a.out {
        let json = serde_json::to_string_pretty(&t)?;
        write_text(&out_dir(&dir)?.join("transfer.json"), &(json + "\n"))?;
    }
    Ok(())
}

pub fn campaign(a: CampaignArgs) -> CmdResult {
    let mut cfg = CampaignConfig::load(existing(&a.config)?)?;
    if let Some(seed) = a.seed {
        cfg.master_seed = seed;
    }
    let out: PathBuf = match (a.out, &cfg.output_dir) {
        (Some(o), _) => o,
        (None, Some(o)) => o.clone(),
        (None, None) => {
            return Err(Failure::Usage(
                "no output directory: pass --out or set output_dir in the config".into(),
            ))
        }
    };
    let report = run_campaign(&cfg, &out)?;
    println!("campaign {} -> {}", report.config_hash, out.display());
    println!("victim {} ledger: {}", report.victim_id, report.victim_queries);
    for (metric, id) in &report.selected {
        println!("selected surrogate ({metric}): {id}");
    }
    let mut lines = String::new();
    for c in &report.correlations {
        let r = c.pearson_r.map_or("undefined".to_string(), |r| format!("{r:.4}"));
        let _ = writeln!(
            lines,
            "pearson r ({}, eps {}, {} proxies): {r}",
            c.metric, c.epsilon, c.samples
        );
    }
    print!("{lines}");
    Ok(())
}

pub fn serve(a: ServeArgs) -> CmdResult {
    let model = MlpModel::load(existing(&a.model)?)?;
    let id = model.model_id().to_string();
    let handle = zest_core::oracle::serve(model, a.addr.as_str())?;
    println!("serving {id} at {}", handle.url());
    handle.wait()?;
    Ok(())
}

pub fn replay(a: ReplayArgs) -> CmdResult {
    let fixture = match &a.fixtures {
        Some(dir) => PaperFixture::load_dir(existing(dir)?)?,
        None => PaperFixture::bundled()?,
    };
    let report = replay_paper_fixture(&fixture, a.metric, a.n)?;
    let table = report.render();
    print!("{table}");
    let stability = if a.stability {
        let s = compare_n_stability(&fixture)?;
        let csv = s.to_csv();
        print!("{csv}");
        Some(csv)
    } else {
        None
    };
    if let Some(dir) = a.out {
        let dir = out_dir(&dir)?;
        write_text(&dir.join(format!("replay_{}_n{}.txt", a.metric, a.n)), &table)?;
        if let Some(csv) = stability {
            write_text(&dir.join("stability.csv"), &csv)?;
        }
    }
    if !report.passed() {
        return Err(Failure::Operation(anyhow::anyhow!(
            "{}/{} closest pairs matched",
            report.matches(),
            report.rows.len()
        )));
    }
    Ok(())
}
