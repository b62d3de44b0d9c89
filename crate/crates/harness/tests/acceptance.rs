//! End-to-end acceptance checks. Run with `--nocapture` to see one line per
//! criterion; the test fails if any criterion does.
//!
//! Every check uses run seed 0.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hyperproto::episodes::{greedy_sample_k2k, sample_episode, DEFAULT_MAX_ATTEMPTS};
use hyperproto::gradcheck::run_suite;
use hyperproto::numerics::sq_euclidean;
use hyperproto::prototypes::{argmin_first, cone_disjointness};
use hyperproto::training::{episode_loss, evaluate_episode, predict};
use hyperproto::{
    ConeProto, Encoder, Error, GaussianProto, HypersphereProto, Item, MultiLabelDataset, MultiLabelItem, Prototype,
    Rng, TrainConfig, Trainer, Variant,
};
use hyperproto_harness::run::{build_encoder, evaluate_trainer, load_data, radius_dynamics, train, Data, Streams};
use hyperproto_harness::stats::{pearson, spearman};
use hyperproto_harness::RunConfig;

const SEED: u64 = 0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn benchmark_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.json");
    RunConfig::load(&path).unwrap()
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

/// Benchmark data plus an untrained benchmark encoder.
fn benchmark_setup() -> (Data, Encoder) {
    let cfg = benchmark_config();
    let data = load_data(&cfg.data, SEED).unwrap();
    let enc = build_encoder(&cfg.encoder, data.train.dim(), &mut Streams::new(SEED).init()).unwrap();
    (data, enc)
}

fn embed_all(enc: &Encoder, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    xs.iter().map(|x| enc.embed(x).unwrap()).collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(SEED, 100);
    let elapsed = start.elapsed();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    let worst = reports.iter().map(|r| r.max_rel_err / r.tolerance).fold(0.0, f64::max);
    let min_configs = reports.iter().map(|r| r.configs).min().unwrap_or(0);
    outcome(
        failed.is_empty() && min_configs >= 100 && within(elapsed, 120),
        format!(
            "{} cases, >= {min_configs} configs each, worst rel err {worst:.3} of tolerance, failed {failed:?}, {:.1?}",
            reports.len(),
            elapsed
        ),
    )
}

fn vanilla_equivalence() -> Outcome {
    let (data, enc) = benchmark_setup();
    let mut rng = Rng::new(SEED, 20);
    let (mut queries, mut mismatches) = (0, 0);
    for _ in 0..100 {
        let ep = sample_episode(&data.train, 5, 5, 5, &mut rng).unwrap();
        let shared = rng.uniform_in(-5.0, 5.0);
        let centers: Vec<Vec<f64>> = ep
            .support_by_class()
            .iter()
            .map(|g| HypersphereProto::from_support(&embed_all(&enc, g)).unwrap().center)
            .collect();
        let protos: Vec<Prototype> = centers
            .iter()
            .map(|c| {
                Prototype::Hypersphere(HypersphereProto {
                    center: c.clone(),
                    radius: shared,
                })
            })
            .collect();
        for q in &ep.query {
            let f = enc.embed(&q.features).unwrap();
            let dist: Vec<f64> = centers.iter().map(|c| sq_euclidean(&f, c).unwrap()).collect();
            queries += 1;
            mismatches += usize::from(predict(&enc, &protos, &q.features).unwrap() != argmin_first(&dist));
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over {queries} queries in 100 episodes"),
    )
}

fn gaussian_equivalence() -> Outcome {
    let (data, enc) = benchmark_setup();
    let mut rng = Rng::new(SEED, 30);
    let (mut queries, mut mismatches) = (0, 0);
    for _ in 0..100 {
        let ep = sample_episode(&data.train, 5, 5, 5, &mut rng).unwrap();
        let log_sigma = rng.uniform_in(-2.0, 2.0);
        let means: Vec<Vec<f64>> = ep
            .support_by_class()
            .iter()
            .map(|g| GaussianProto::from_support(&embed_all(&enc, g)).unwrap().mean)
            .collect();
        let protos: Vec<Prototype> = means
            .iter()
            .map(|m| {
                Prototype::Gaussian(GaussianProto {
                    mean: m.clone(),
                    log_sigma,
                })
            })
            .collect();
        for q in &ep.query {
            let f = enc.embed(&q.features).unwrap();
            let dist: Vec<f64> = means.iter().map(|m| sq_euclidean(&f, m).unwrap()).collect();
            queries += 1;
            mismatches += usize::from(predict(&enc, &protos, &q.features).unwrap() != argmin_first(&dist));
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over {queries} queries in 100 episodes"),
    )
}

fn benchmark() -> Outcome {
    let cfg = benchmark_config();
    let start = Instant::now();
    let data = load_data(&cfg.data, SEED).unwrap();
    let run = |variant| {
        let config = TrainConfig {
            variant,
            ..cfg.train.clone()
        };
        let (trainer, _) = train(&config, &cfg.encoder, &data.train, SEED).unwrap();
        let metrics = evaluate_trainer(&trainer, &data.test, SEED, jobs()).unwrap();
        (trainer, metrics)
    };
    let (sphere, sphere_m) = run(Variant::Hypersphere);
    let (_, vanilla_m) = run(Variant::Vanilla);
    let elapsed = start.elapsed();
    let spread = data.train.true_spread().unwrap();
    let rho = spearman(&sphere.store.scales(), spread).unwrap_or(f64::NAN);
    let a = sphere_m.accuracy >= vanilla_m.accuracy - 0.005;
    let b = rho >= 0.8;
    outcome(
        a && b && within(elapsed, 300),
        format!(
            "(a) {} hypersphere {:.4} ± {:.4} vs vanilla {:.4} ± {:.4}; (b) {} spearman(radii, spread) = {rho:.3}; {} classes, {} eval episodes, {:.1?}",
            if a { "ok" } else { "FAILED" },
            sphere_m.accuracy,
            sphere_m.accuracy_ci95,
            vanilla_m.accuracy,
            vanilla_m.accuracy_ci95,
            if b { "ok" } else { "FAILED" },
            spread.len(),
            sphere_m.n_episodes,
            elapsed
        ),
    )
}

fn one_shot_degeneracy() -> Outcome {
    let (data, enc) = benchmark_setup();
    let config = TrainConfig {
        k_shot: 1,
        ..benchmark_config().train
    };
    let trainer = Trainer::new(config, enc.clone(), &data.train, &mut Streams::new(SEED).init()).unwrap();
    let nonzero = trainer.store.scales().iter().filter(|&&e| e != 0.0).count();
    let mut rng = Rng::new(SEED, 50);
    let mut differing = 0;
    for _ in 0..100 {
        let ep = sample_episode(&data.test, 5, 1, 5, &mut rng).unwrap();
        let sphere = evaluate_episode(&enc, &ep, Variant::Hypersphere).unwrap();
        let vanilla = evaluate_episode(&enc, &ep, Variant::Vanilla).unwrap();
        differing += usize::from(sphere.predictions != vanilla.predictions);
    }
    outcome(
        nonzero == 0 && differing == 0,
        format!(
            "{nonzero} of {} radii nonzero at init, {differing} of 100 episodes with different predictions",
            trainer.store.len()
        ),
    )
}

fn greedy_sampler() -> Outcome {
    let mut rng = Rng::new(SEED, 60);
    let single = MultiLabelDataset::new(
        (0..60)
            .map(|i| MultiLabelItem {
                id: i as u64,
                labels: BTreeMap::from([(i % 6, 1)]),
            })
            .collect(),
    )
    .unwrap();
    let mixed = MultiLabelDataset::new(
        (0..300)
            .map(|i| {
                let mut labels = BTreeMap::new();
                for _ in 0..1 + rng.below(3) {
                    *labels.entry(rng.below(8)).or_insert(0) += 1;
                }
                MultiLabelItem { id: i, labels }
            })
            .collect(),
    )
    .unwrap();
    let mut bad = 0;
    for seed in 0..1000 {
        for (ds, n, k) in [(&single, 5, 3), (&mixed, 5, 2)] {
            let ok = match greedy_sample_k2k(ds, n, k, &mut Rng::new(seed, 0), DEFAULT_MAX_ATTEMPTS) {
                Ok(s) => s.classes().len() == n && s.counts.values().all(|&c| (k..=2 * k).contains(&c)),
                Err(_) => false,
            };
            bad += usize::from(!ok);
        }
    }
    let adversarial = MultiLabelDataset::new(
        (0..10)
            .map(|i| MultiLabelItem {
                id: i,
                labels: BTreeMap::from([(i as usize % 3, 3)]),
            })
            .collect(),
    )
    .unwrap();
    let timeout = greedy_sample_k2k(&adversarial, 2, 1, &mut Rng::new(SEED, 0), 10_000);
    let timed_out = matches!(timeout, Err(Error::SamplingTimeout { .. }));
    outcome(
        bad == 0 && timed_out,
        format!("{bad} bad samples over 2000 runs, adversarial data timed out: {timed_out}"),
    )
}

fn radius_dynamics_check() -> Outcome {
    let cfg = benchmark_config();
    let start = Instant::now();
    let data = load_data(&cfg.data, SEED).unwrap();
    let trace = radius_dynamics(&cfg, &data.train, SEED).unwrap();
    let expected = (cfg.radius_dynamics.total - cfg.radius_dynamics.warmup) / cfg.radius_dynamics.log_every;
    let r = pearson(&trace.radii(), &trace.distances()).unwrap_or(f64::NAN);

    let mut frozen_cfg = cfg.clone();
    frozen_cfg.train.lr_scale = 0.0;
    let frozen = radius_dynamics(&frozen_cfg, &data.train, SEED).unwrap();
    let radii = frozen.radii();
    let constant = radii.iter().all(|r| r.to_bits() == radii[0].to_bits());
    let elapsed = start.elapsed();
    outcome(
        trace.points.len() == expected && r > 0.0 && constant && within(elapsed, 120),
        format!(
            "{} of {expected} points, pearson(radius, mean distance) = {r:.4}, frozen radius constant: {constant}, {:.1?}",
            trace.points.len(),
            elapsed
        ),
    )
}

fn cone_properties() -> Outcome {
    let mut rng = Rng::new(SEED, 80);
    let (mut out_of_range, mut negative, mut separated_nonzero, mut split_err) = (0, 0, 0, 0.0f64);
    for _ in 0..2000 {
        let d = 2 + rng.below(6);
        let n = 2 + rng.below(4);
        let cones: Vec<ConeProto> = (0..n)
            .map(|_| ConeProto {
                center: (0..d).map(|_| rng.standard_normal()).collect(),
                angle: rng.uniform_in(-PI, PI),
            })
            .collect();
        for c in &cones {
            let f: Vec<f64> = (0..d)
                .map(|_| rng.standard_normal() * rng.uniform_in(0.01, 100.0))
                .collect();
            let m = c.measure(&f).unwrap().value;
            out_of_range += usize::from(!(-1.0..=1.0).contains(&m));
        }
        negative += usize::from(cone_disjointness(&cones).unwrap().value < 0.0);

        let protos: Vec<Prototype> = cones.iter().cloned().map(Prototype::Cone).collect();
        let query: Vec<Item> = (0..n)
            .map(|label| Item {
                features: (0..d).map(|_| rng.standard_normal()).collect(),
                label,
            })
            .collect();
        let enc = Encoder::identity(d).unwrap();
        let l = episode_loss(&enc, &protos, &query, Variant::Cone).unwrap();
        split_err = split_err.max((l.value - (l.cls + l.dis)).abs());

        // Orthogonal axes with half-angles summing below the right angle.
        let apart: Vec<ConeProto> = (0..d.min(n))
            .map(|i| {
                let mut center = vec![0.0; d];
                center[i] = rng.uniform_in(0.1, 10.0);
                ConeProto {
                    center,
                    angle: rng.uniform_in(-0.7, 0.7),
                }
            })
            .collect();
        if apart.len() >= 2 {
            separated_nonzero += usize::from(cone_disjointness(&apart).unwrap().value != 0.0);
        }
    }
    outcome(
        out_of_range == 0 && negative == 0 && separated_nonzero == 0 && split_err == 0.0,
        format!(
            "{out_of_range} measurements outside [-1, 1], {negative} negative penalties, \
             {separated_nonzero} nonzero penalties for separated cones, max |total - (cls + dis)| = {split_err:e}"
        ),
    )
}

const DETERMINISM_CONFIG: &str = r#"{
  "train": { "n_way": 5, "k_shot": 5, "n_query": 5, "steps": 200, "eval_episodes": 200 },
  "encoder": { "kind": "mlp", "hidden": [32], "output_dim": 16 },
  "data": {
    "source": "mixture",
    "mixture": { "n_classes": 25, "dim": 16, "samples_per_class": 100,
                 "mean_scale": 2.0, "spread_lo": 0.5, "spread_hi": 2.0 },
    "n_test_classes": 5
  }
}"#;

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, DETERMINISM_CONFIG).unwrap();
    let run = |name: &str| -> std::io::Result<Vec<u8>> {
        let out: PathBuf = dir.path().join(name);
        for sub in ["train", "eval"] {
            let status = Command::new(env!("CARGO_BIN_EXE_hyperproto"))
                .args([sub, "--config"])
                .arg(&cfg)
                .args(["--seed", &SEED.to_string(), "--jobs", &jobs().to_string(), "--out"])
                .arg(&out)
                .output()?
                .status;
            if !status.success() {
                return Err(std::io::Error::other(format!("{sub} exited with {status}")));
            }
        }
        std::fs::read(out.join("metrics.csv"))
    };
    match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => outcome(a == b, format!("metrics.csv {} bytes, identical: {}", a.len(), a == b)),
        (a, b) => outcome(false, format!("run failed: {:?} / {:?}", a.err(), b.err())),
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        (1, "gradient oracle suite", gradient_suite),
        (2, "vanilla-prototype equivalence", vanilla_equivalence),
        (3, "shared-sigma gaussian equivalence", gaussian_equivalence),
        (4, "synthetic benchmark", benchmark),
        (5, "1-shot degeneracy", one_shot_degeneracy),
        (6, "greedy sampler", greedy_sampler),
        (7, "radius dynamics", radius_dynamics_check),
        (8, "cone properties", cone_properties),
        (9, "determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "{} criterion {n} ({name}): {}",
            if result.passed { "PASS" } else { "FAIL" },
            result.detail
        );
        if !result.passed {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
