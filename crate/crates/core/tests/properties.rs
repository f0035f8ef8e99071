//! Property tests over randomly generated models, plans, signatures and batches.

mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use zest_core::attack::{pgd, quantize, transfer_eval, AdversarialBatch, AttackConfig};
use zest_core::eval::pearson;
use zest_core::lime::{
    compute_signature, fit_point_model, generate_masks, make_plan, LimeConfig, PointModel,
    SegmentGrid, Signature,
};
use zest_core::linalg::Matrix;
use zest_core::nn::{blobs, train, Dataset, MlpModel, TrainConfig};
use zest_core::oracle::{serve, LocalOracle, QueryLedger, QueryOracle, QueryPurpose, RemoteEndpoint, RemoteOracle};
use zest_core::seed::rng;
use zest_core::zest::{rank_candidates, vector_distance, zest_distance, DistanceMetric};

use common::*;

fn random_model(seed: u64, dim: usize, classes: usize) -> MlpModel {
    let mut r = rng(seed);
    let depth = r.random_range(0..3usize);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(1..12)).collect();
    MlpModel::init("m", dim, &hidden, classes, &mut r).unwrap()
}

fn random_signature(id: &str, seed: u64, points: usize, classes: usize, segments: usize) -> Signature {
    let mut r = rng(seed);
    let pts = (0..points)
        .map(|_| PointModel {
            coefficients: Matrix::new(
                classes,
                segments,
                (0..classes * segments).map(|_| r.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            intercepts: (0..classes).map(|_| r.random()).collect(),
        })
        .collect();
    Signature::new(id, "fp", pts).unwrap()
}

fn small_plan(seed: u64, n: usize, p: usize, s: usize, dim: usize) -> zest_core::lime::PerturbationPlan {
    let data = Dataset::new(random_matrix(n + 4, dim, seed), vec![0; n + 4], 2).unwrap();
    make_plan(
        &data,
        n,
        SegmentGrid::contiguous(dim, s).unwrap(),
        LimeConfig {
            perturbations: p,
            ..LimeConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probability_rows_are_distributions(
        seed in any::<u64>(),
        dim in 1usize..12,
        classes in 2usize..8,
        scale in prop_oneof![Just(1.0f64), Just(100.0), Just(1e4)],
    ) {
        let m = random_model(seed, dim, classes);
        let mut r = rng(seed ^ 1);
        let batch = Matrix::new(
            6,
            dim,
            (0..6 * dim).map(|_| r.random_range(-scale..scale)).collect(),
        ).unwrap();
        let probs = m.forward(&batch).unwrap();
        for row in probs.iter_rows() {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences(seed in any::<u64>(), dim in 1usize..8, classes in 2usize..5) {
        let m = random_model(seed, dim, classes);
        let mut r = rng(seed ^ 2);
        let x: Vec<f64> = (0..dim).map(|_| r.random()).collect();
        let label = r.random_range(0..classes);
        let g = m.input_gradient(&x, label).unwrap();
        let fd = central_difference(|p| m.loss(p, label).unwrap(), &x, 1e-6);
        prop_assert!(relative_error(&g, &fd) <= 1e-4, "{g:?} vs {fd:?}");
    }

    #[test]
    fn identical_queries_give_identical_answers(seed in any::<u64>(), dim in 1usize..8) {
        let oracle = LocalOracle::new(random_model(seed, dim, 3));
        let batch = random_matrix(5, dim, seed);
        let a = oracle.query(&batch, QueryPurpose::Other).unwrap();
        let b = oracle.query(&batch, QueryPurpose::Other).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(oracle.ledger().total(), 10);
    }

    #[test]
    fn signature_costs_exactly_n_times_p_plus_n(
        seed in any::<u64>(),
        n in 1usize..5,
        s in 2usize..5,
        extra in 0usize..20,
    ) {
        let p = s + 1 + extra;
        let plan = small_plan(seed, n, p, s, s * 2);
        let oracle = LocalOracle::new(random_model(seed, s * 2, 3));
        compute_signature(&oracle, &plan).unwrap();
        let snap = oracle.ledger().snapshot();
        prop_assert_eq!(snap.signature, (n * p) as u64);
        prop_assert_eq!(snap.baseline, n as u64);
        prop_assert_eq!(snap.total, (n * p + n) as u64);
        prop_assert_eq!(plan.perturbation_queries(), (n * p) as u64);
    }

    #[test]
    fn signatures_are_deterministic(seed in any::<u64>(), n in 1usize..4, s in 2usize..5) {
        let plan = small_plan(seed, n, 3 * s, s, s + 3);
        let model = random_model(seed, s + 3, 4);
        let a = compute_signature(&LocalOracle::new(model.clone()), &plan).unwrap();
        let b = compute_signature(&LocalOracle::new(model), &plan).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn affine_oracles_are_recovered_exactly(
        seed in any::<u64>(),
        s in 1usize..=8,
        factor in 4usize..8,
        classes in 1usize..4,
    ) {
        let case = lime_case(seed, s, factor * s, classes);
        prop_assume!(case.is_some(), "masks leave the regression underdetermined");
        let case = case.unwrap();
        prop_assert!(max_gap(&case.fitted, &case.exact) <= 1e-8);
        prop_assert!(max_gap(&case.fitted, &case.reference) <= 1e-8);
    }

    #[test]
    fn weighted_residuals_are_orthogonal_to_the_design(
        seed in any::<u64>(),
        s in 2usize..7,
        factor in 4usize..8,
    ) {
        let dim = s * 2;
        let p = factor * s;
        let model = random_model(seed, dim, 3);
        let oracle = LocalOracle::new(model.clone());
        let mut r = rng(seed ^ 3);
        let x: Vec<f64> = (0..dim).map(|_| r.random()).collect();
        let grid = SegmentGrid::contiguous(dim, s).unwrap();
        let masks = generate_masks(seed, 1, p, s);
        let cfg = LimeConfig { perturbations: p, ridge: 0.0, ..LimeConfig::default() };
        let fit = fit_point_model(&oracle, &x, &masks, &grid, &cfg);
        prop_assume!(fit.is_ok(), "masks leave the regression underdetermined");
        let fit = fit.unwrap();

        let assignment = grid.assignment();
        let means = segment_means(&x, assignment, s);
        let (design, weights) = regression_rows(&masks, s);
        let mut inputs = vec![x.clone()];
        for m in masks.chunks_exact(s) {
            inputs.push((0..dim).map(|j| if m[assignment[j]] == 1 { x[j] } else { means[assignment[j]] }).collect());
        }
        for k in 0..3 {
            let coef = fit.coefficients.row(k);
            let mut normal = vec![0.0; s + 1];
            for ((row, w), xi) in design.iter().zip(&weights).zip(&inputs) {
                let pred = fit.intercepts[k] + row.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>();
                let resid = model.predict_proba_row(xi)[k] - pred;
                normal[0] += w * resid;
                for (j, v) in row.iter().enumerate() {
                    normal[j + 1] += w * resid * v;
                }
            }
            prop_assert!(normal.iter().all(|v| v.abs() <= 1e-6), "{normal:?}");
        }
    }

    #[test]
    fn metric_axioms_hold(a in vec_strategy(12), b in vec_strategy(12), c in vec_strategy(12)) {
        for metric in DistanceMetric::ALL {
            let Ok(ab) = vector_distance(&a, &b, metric) else { continue };
            let ba = vector_distance(&b, &a, metric).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(vector_distance(&a, &a, metric).unwrap(), 0.0);
            if metric != DistanceMetric::Cosine {
                let ac = vector_distance(&a, &c, metric).unwrap();
                let bc = vector_distance(&b, &c, metric).unwrap();
                prop_assert!(ac <= (ab + bc) * (1.0 + 1e-12));
            } else {
                prop_assert!((0.0..=2.0).contains(&ab));
            }
        }
    }

    #[test]
    fn cosine_ignores_positive_scaling(
        a in vec_strategy(10),
        b in vec_strategy(10),
        alpha in 0.01f64..100.0,
        beta in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|&v| v != 0.0) && b.iter().any(|&v| v != 0.0));
        let d = vector_distance(&a, &b, DistanceMetric::Cosine).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * alpha).collect();
        let tb: Vec<f64> = b.iter().map(|v| v * beta).collect();
        prop_assert!((vector_distance(&sa, &sb, DistanceMetric::Cosine).unwrap() - d).abs() <= 1e-12);
        prop_assert!((vector_distance(&sa, &tb, DistanceMetric::Cosine).unwrap() - d).abs() <= 1e-12);
    }

    #[test]
    fn selection_survives_increasing_transforms(steps in prop::collection::vec(0u32..40, 1..10)) {
        let cands: Vec<(String, f64)> = steps
            .iter()
            .enumerate()
            .map(|(i, &k)| (format!("p{:02}", steps.len() - i), k as f64 / 8.0))
            .collect();
        let base = rank_candidates("v", DistanceMetric::L2, "fp", cands.clone(), 0.0).unwrap();
        let transforms: [fn(f64) -> f64; 3] = [|d| d * d * d + d, f64::exp, |d| (1.0 + d).ln()];
        for f in transforms {
            let moved = cands.iter().map(|(id, d)| (id.clone(), f(*d))).collect();
            let r = rank_candidates("v", DistanceMetric::L2, "fp", moved, 0.0).unwrap();
            prop_assert_eq!(&r.selected, &base.selected);
            prop_assert_eq!(&r.tied, &base.tied);
        }
    }

    #[test]
    fn pearson_is_symmetric_affine_invariant_and_sign_aware(
        xs in prop::collection::vec(-5.0f64..5.0, 3..20),
        scale in 0.1f64..10.0,
        shift in -10.0f64..10.0,
    ) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + i as f64 * 0.3).collect();
        let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
        prop_assert_eq!(r, pearson(&ys, &xs).unwrap());
        let moved: Vec<f64> = ys.iter().map(|y| scale * y + shift).collect();
        prop_assert!((pearson(&xs, &moved).unwrap() - r).abs() <= 1e-9);
        let flipped: Vec<f64> = ys.iter().map(|y| -y).collect();
        prop_assert!((pearson(&xs, &flipped).unwrap() + r).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn transfer_counts_match_a_recount(seed in any::<u64>(), rows in 1usize..30, dim in 1usize..6) {
        let victim = random_model(seed, dim, 3);
        let batch = random_batch(seed, rows, dim, 3);
        let t = transfer_eval(&LocalOracle::new(victim.clone()), &batch).unwrap();
        let (success, eligible, raw) = recount(&victim, &batch);
        prop_assert_eq!(t.success_count, success);
        prop_assert_eq!(t.eligible, eligible);
        prop_assert_eq!(t.raw_success_count, raw);
        prop_assert_eq!(t.queries.attack_eval, 2 * rows as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn training_is_byte_deterministic(seed in any::<u64>(), width in 1usize..8) {
        let data = blobs(3, 4, 10, 0.1, seed).unwrap();
        let cfg = TrainConfig { epochs: 3, hidden: vec![width], rng_seed: seed, ..TrainConfig::default() };
        let (a, _) = train(&data, &cfg, "t").unwrap();
        let (b, _) = train(&data, &cfg, "t").unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn pgd_stays_inside_the_budget_and_the_box(
        seed in any::<u64>(),
        eps in 0.001f64..0.5,
        step_share in 0.01f64..=1.0,
        steps in 1usize..8,
        restarts in 1usize..4,
        quantize_8bit in any::<bool>(),
        random_init in any::<bool>(),
    ) {
        let data = blobs(3, 5, 4, 0.2, seed).unwrap();
        let model = random_model(seed, 5, 3);
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: eps * step_share,
            steps,
            restarts,
            rng_seed: seed,
            quantize_8bit,
            random_init,
        };
        let batch = pgd(&model, &data, &cfg).unwrap();
        for i in 0..batch.len() {
            for (a, x) in batch.adversarials().row(i).iter().zip(batch.originals().row(i)) {
                prop_assert!((0.0..=1.0).contains(a));
                prop_assert!((a - x).abs() <= eps);
            }
        }
        let again = pgd(&model, &data, &cfg).unwrap();
        prop_assert_eq!(batch.to_bytes(), again.to_bytes());
    }

    #[test]
    fn more_restarts_never_do_worse(seed in any::<u64>(), extra in 1usize..4) {
        let data = blobs(3, 4, 3, 0.15, seed).unwrap();
        let model = random_model(seed, 4, 3);
        let cfg = AttackConfig { epsilon: 0.15, step_size: 0.05, steps: 5, restarts: 1, rng_seed: seed, ..AttackConfig::default() };
        let one = pgd(&model, &data, &cfg).unwrap();
        let many = pgd(&model, &data, &AttackConfig { restarts: 1 + extra, ..cfg }).unwrap();
        for i in 0..data.len() {
            let y = data.labels()[i];
            let key = |b: &AdversarialBatch| (model.predict(b.adversarials().row(i)) != y, b.outcomes()[i].loss);
            let (f1, l1) = key(&one);
            let (fr, lr) = key(&many);
            prop_assert!((fr && !f1) || (fr == f1 && lr >= l1), "point {i}: ({f1}, {l1}) vs ({fr}, {lr})");
        }
    }

    #[test]
    fn quantization_is_idempotent_and_in_budget(seed in any::<u64>(), eps in 0.0005f64..0.3) {
        let batch = random_batch_with_eps(seed, 8, 5, 3, eps);
        let q = quantize(&batch);
        prop_assert_eq!(quantize(&q).to_bytes(), q.to_bytes());
        for i in 0..q.len() {
            for (a, x) in q.adversarials().row(i).iter().zip(q.originals().row(i)) {
                prop_assert!((0.0..=1.0).contains(a) && (a - x).abs() <= eps);
            }
        }
    }
}

#[test]
fn ledger_is_monotone_under_concurrent_charges() {
    let ledger = Arc::new(QueryLedger::new());
    let done = Arc::new(AtomicBool::new(false));
    let purposes = [
        QueryPurpose::Signature,
        QueryPurpose::Baseline,
        QueryPurpose::AttackEval,
        QueryPurpose::Other,
    ];
    let workers: Vec<_> = (0..4)
        .map(|t| {
            let ledger = ledger.clone();
            std::thread::spawn(move || {
                for k in 0..2000u64 {
                    ledger.record(purposes[(t + k as usize) % 4], k % 5 + 1);
                }
            })
        })
        .collect();
    let watcher = {
        let ledger = ledger.clone();
        let done = done.clone();
        std::thread::spawn(move || {
            let mut last = ledger.snapshot();
            while !done.load(Ordering::Acquire) {
                let now = ledger.snapshot();
                assert_eq!(now.total, now.signature + now.baseline + now.attack_eval + now.other);
                assert!(now.signature >= last.signature && now.baseline >= last.baseline);
                assert!(now.attack_eval >= last.attack_eval && now.other >= last.other);
                assert!(now.total >= last.total);
                last = now;
            }
        })
    };
    for w in workers {
        w.join().unwrap();
    }
    done.store(true, Ordering::Release);
    watcher.join().unwrap();
    let per_thread: u64 = (0..2000u64).map(|k| k % 5 + 1).sum();
    assert_eq!(ledger.total(), 4 * per_thread);
}

#[test]
fn remote_answers_match_local_across_random_batches() {
    let model = random_model(11, 6, 4);
    let server = serve(model.clone(), "127.0.0.1:0").unwrap();
    let remote = RemoteOracle::connect(RemoteEndpoint {
        max_batch_rows: 7,
        ..RemoteEndpoint::new(server.url())
    })
    .unwrap();
    let local = LocalOracle::new(model);
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(16));
    runner
        .run(&(any::<u64>(), 1usize..40), |(seed, rows)| {
            let batch = random_matrix(rows, 6, seed);
            let a = remote.query(&batch, QueryPurpose::Other).unwrap();
            let b = local.query(&batch, QueryPurpose::Other).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            Ok(())
        })
        .unwrap();
    assert_eq!(remote.ledger().total(), local.ledger().total());
}

#[test]
fn signature_distance_to_self_is_zero() {
    let a = random_signature("a", 1, 4, 3, 5);
    for metric in DistanceMetric::ALL {
        assert_eq!(zest_distance(&a, &a, metric).unwrap(), 0.0);
    }
}
