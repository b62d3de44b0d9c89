//! Randomized finite-difference checks of every analytic gradient.
//!
//! Each case draws random small configurations, computes the analytic gradient
//! through the production code path and compares it against central
//! differences of the *value* alone. Configurations within `KINK_MARGIN` of a
//! non-differentiable locus (cone boundary, hinge, ReLU kink) are redrawn
//! rather than checked.
//!
//! Coordinates whose gradient magnitude is below `RESOLVABLE` on both sides
//! are held to `ABS_TOLERANCE` instead of the relative bound. Some are zero by
//! construction, e.g. output-layer biases when centers are support means.

use std::f64::consts::PI;

use crate::encoder::{Activation, Encoder, ForwardTape};
use crate::episodes::{Dataset, Item};
use crate::numerics::{finite_diff_report, norm, FdReport, Rng};
use crate::prototypes::{
    angle_between, cone_disjointness, ConeProto, GaussianProto, HypersphereProto, Prototype, Variant,
};
use crate::training::{episode_loss, TrainConfig, TrainMode, Trainer};

/// Finite-difference step used by every case.
pub const FD_STEP: f64 = 1e-5;
/// Distance from a kink below which a configuration is redrawn.
pub const KINK_MARGIN: f64 = 1e-3;
const RELU_MARGIN: f64 = 1e-4;
/// Gradient magnitude, per unit of `max(1, |f|)`, below which the relative
/// metric is dominated by rounding.
pub const RESOLVABLE: f64 = 1e-5;
/// Absolute bound, per unit of `max(1, |f|)`, for coordinates below `RESOLVABLE`.
pub const ABS_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCase {
    HypersphereMeasure,
    ConeMeasure,
    GaussianMeasure,
    ConeDisjointness,
    MlpRelu,
    MlpTanh,
    EpisodeLoss(Variant),
    /// Full trainer path, including re-estimated centers in re-init mode.
    TrainerBatch(TrainMode),
}

impl GradCase {
    pub fn all() -> Vec<GradCase> {
        let mut cases = vec![
            GradCase::HypersphereMeasure,
            GradCase::ConeMeasure,
            GradCase::GaussianMeasure,
            GradCase::ConeDisjointness,
            GradCase::MlpRelu,
            GradCase::MlpTanh,
        ];
        cases.extend(Variant::ALL.into_iter().map(GradCase::EpisodeLoss));
        cases.push(GradCase::TrainerBatch(TrainMode::Persistent));
        cases.push(GradCase::TrainerBatch(TrainMode::EpisodicReinit));
        cases
    }

    pub fn name(&self) -> String {
        match self {
            GradCase::HypersphereMeasure => "measure/hypersphere".into(),
            GradCase::ConeMeasure => "measure/cone".into(),
            GradCase::GaussianMeasure => "measure/gaussian".into(),
            GradCase::ConeDisjointness => "cone-disjointness".into(),
            GradCase::MlpRelu => "mlp-backward/relu".into(),
            GradCase::MlpTanh => "mlp-backward/tanh".into(),
            GradCase::EpisodeLoss(v) => format!("episode-loss/{v}"),
            GradCase::TrainerBatch(TrainMode::Persistent) => "trainer-batch/persistent".into(),
            GradCase::TrainerBatch(TrainMode::EpisodicReinit) => "trainer-batch/episodic-reinit".into(),
        }
    }

    /// Maximum allowed relative error.
    pub fn tolerance(&self) -> f64 {
        match self {
            GradCase::HypersphereMeasure
            | GradCase::ConeMeasure
            | GradCase::GaussianMeasure
            | GradCase::MlpRelu
            | GradCase::MlpTanh => 1e-6,
            _ => 1e-5,
        }
    }

    /// Errors of one random configuration, or `None` if the draw landed near
    /// a kink.
    pub fn check_once(&self, rng: &mut Rng) -> Option<FdReport> {
        match self {
            GradCase::HypersphereMeasure => hypersphere_measure(rng),
            GradCase::ConeMeasure => cone_measure(rng),
            GradCase::GaussianMeasure => gaussian_measure(rng),
            GradCase::ConeDisjointness => disjointness(rng),
            GradCase::MlpRelu => mlp(rng, Activation::Relu),
            GradCase::MlpTanh => mlp(rng, Activation::Tanh),
            GradCase::EpisodeLoss(v) => episode(rng, *v),
            GradCase::TrainerBatch(mode) => trainer_batch(rng, *mode),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub configs: usize,
    pub redrawn: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Max absolute error over coordinates too small to compare relatively.
    pub max_abs_err: f64,
    pub small_coords: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.max_abs_err < ABS_TOLERANCE
    }
}

/// Checks `configs` accepted configurations of `case`.
pub fn run_case(case: GradCase, configs: usize, rng: &mut Rng) -> CaseReport {
    let mut report = CaseReport {
        name: case.name(),
        configs: 0,
        redrawn: 0,
        max_rel_err: 0.0,
        tolerance: case.tolerance(),
        max_abs_err: 0.0,
        small_coords: 0,
    };
    while report.configs < configs {
        match case.check_once(rng) {
            Some(fd) => {
                report.configs += 1;
                report.max_rel_err = report.max_rel_err.max(fd.max_rel_err);
                report.max_abs_err = report.max_abs_err.max(fd.max_abs_err);
                report.small_coords += fd.small;
            }
            None => {
                report.redrawn += 1;
                assert!(
                    report.redrawn < 100 * configs.max(1),
                    "{}: too many redraws",
                    report.name
                );
            }
        }
    }
    report
}

/// Runs every case with `configs` configurations; case `i` uses `fork(i)` of
/// the stream seeded by `seed`.
pub fn run_suite(seed: u64, configs: usize) -> Vec<CaseReport> {
    let root = Rng::new(seed, 0);
    GradCase::all()
        .into_iter()
        .enumerate()
        .map(|(i, case)| run_case(case, configs, &mut root.fork(i as u64)))
        .collect()
}

fn uniform_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(lo, hi)).collect()
}

fn hypersphere_measure(rng: &mut Rng) -> Option<FdReport> {
    let d = 1 + rng.below(6);
    let mut point = uniform_vec(rng, 2 * d, -2.0, 2.0);
    point.push(rng.uniform_in(-1.0, 2.0));
    let value = |p: &[f64]| {
        let proto = HypersphereProto {
            center: p[d..2 * d].to_vec(),
            radius: p[2 * d],
        };
        proto.measure(&p[..d]).unwrap().value
    };
    let proto = HypersphereProto {
        center: point[d..2 * d].to_vec(),
        radius: point[2 * d],
    };
    let m = proto.measure(&point[..d]).unwrap();
    let analytic = [m.grad_embedding, m.grad_center, vec![m.grad_scale]].concat();
    Some(finite_diff_report(value, &point, &analytic, FD_STEP, RESOLVABLE))
}

fn cone_measure(rng: &mut Rng) -> Option<FdReport> {
    let d = 2 + rng.below(5);
    let mut point = uniform_vec(rng, 2 * d, -1.0, 1.0);
    point.push(rng.uniform_in(-1.2, 1.2));
    let (f, z, eps) = (&point[..d], &point[d..2 * d], point[2 * d]);
    if norm(f) < 0.1 || norm(z) < 0.1 {
        return None;
    }
    let theta = angle_between(f, z).unwrap();
    if (theta - eps.abs()).abs() < KINK_MARGIN || theta > PI - KINK_MARGIN {
        return None;
    }
    let proto = ConeProto {
        center: z.to_vec(),
        angle: eps,
    };
    let m = proto.measure(f).unwrap();
    let value = |p: &[f64]| {
        let proto = ConeProto {
            center: p[d..2 * d].to_vec(),
            angle: p[2 * d],
        };
        proto.measure(&p[..d]).unwrap().value
    };
    let analytic = [m.grad_embedding, m.grad_center, vec![m.grad_scale]].concat();
    Some(finite_diff_report(value, &point, &analytic, FD_STEP, RESOLVABLE))
}

fn gaussian_measure(rng: &mut Rng) -> Option<FdReport> {
    let d = 1 + rng.below(6);
    let mut point = uniform_vec(rng, 2 * d, -2.0, 2.0);
    point.push(rng.uniform_in(-1.0, 1.0));
    let value = |p: &[f64]| {
        let proto = GaussianProto {
            mean: p[d..2 * d].to_vec(),
            log_sigma: p[2 * d],
        };
        proto.measure(&p[..d]).unwrap().value
    };
    let proto = GaussianProto {
        mean: point[d..2 * d].to_vec(),
        log_sigma: point[2 * d],
    };
    let m = proto.measure(&point[..d]).unwrap();
    let analytic = [m.grad_embedding, m.grad_center, vec![m.grad_scale]].concat();
    Some(finite_diff_report(value, &point, &analytic, FD_STEP, RESOLVABLE))
}

fn cones_from(p: &[f64], n: usize, d: usize) -> Vec<ConeProto> {
    (0..n)
        .map(|i| ConeProto {
            center: p[i * d..(i + 1) * d].to_vec(),
            angle: p[n * d + i],
        })
        .collect()
}

/// True when every cone pair is clear of the hinge and the `|ε|` kinks.
fn cones_clear_of_kinks(cones: &[ConeProto]) -> bool {
    if cones
        .iter()
        .any(|c| norm(&c.center) < 0.1 || c.angle.abs() < KINK_MARGIN)
    {
        return false;
    }
    for i in 0..cones.len() {
        for j in i + 1..cones.len() {
            let theta = angle_between(&cones[i].center, &cones[j].center).unwrap();
            let overlap = cones[i].angle.abs() + cones[j].angle.abs() - theta;
            if overlap.abs() < KINK_MARGIN || !(KINK_MARGIN..=PI - KINK_MARGIN).contains(&theta) {
                return false;
            }
        }
    }
    true
}

fn disjointness(rng: &mut Rng) -> Option<FdReport> {
    let n = 2 + rng.below(4);
    let d = 2 + rng.below(3);
    let mut point = uniform_vec(rng, n * d, -1.0, 1.0);
    point.extend(uniform_vec(rng, n, -1.0, 1.0));
    let cones = cones_from(&point, n, d);
    if !cones_clear_of_kinks(&cones) {
        return None;
    }
    let dis = cone_disjointness(&cones).unwrap();
    let analytic = [dis.grad_centers.concat(), dis.grad_angles].concat();
    let value = |p: &[f64]| cone_disjointness(&cones_from(p, n, d)).unwrap().value;
    Some(finite_diff_report(value, &point, &analytic, FD_STEP, RESOLVABLE))
}

fn near_relu_kink(tapes: &[ForwardTape]) -> bool {
    tapes
        .iter()
        .flat_map(|t| t.pre_activations().iter().rev().skip(1))
        .flatten()
        .any(|p| p.abs() < RELU_MARGIN)
}

fn mlp(rng: &mut Rng, activation: Activation) -> Option<FdReport> {
    let hidden = 1 + rng.below(3);
    let dims: Vec<usize> = (0..hidden + 2).map(|_| 1 + rng.below(6)).collect();
    let mut enc = Encoder::mlp(&dims, activation, rng).unwrap();
    // non-zero biases so ReLU units are not all pinned to the origin
    let mut params = enc.flat_params();
    params.iter_mut().for_each(|p| *p += rng.uniform_in(-0.2, 0.2));
    enc.set_flat_params(&params).unwrap();
    let x = uniform_vec(rng, dims[0], -1.5, 1.5);
    let go = uniform_vec(rng, *dims.last().unwrap(), -1.0, 1.0);
    let (_, tape) = enc.forward(&x).unwrap();
    if activation == Activation::Relu && near_relu_kink(std::slice::from_ref(&tape)) {
        return None;
    }
    let g = enc.backward(&tape, &go).unwrap();
    let np = params.len();
    let point = [params, x].concat();
    let analytic = [g.flat_params(), g.input_grad].concat();
    let value = |p: &[f64]| {
        let mut e = enc.clone();
        e.set_flat_params(&p[..np]).unwrap();
        e.embed(&p[np..])
            .unwrap()
            .iter()
            .zip(&go)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    Some(finite_diff_report(value, &point, &analytic, FD_STEP, RESOLVABLE))
}

fn random_proto(rng: &mut Rng, variant: Variant, d: usize) -> Prototype {
    let center = uniform_vec(rng, d, -1.0, 1.0);
    match variant {
        Variant::Hypersphere => Prototype::Hypersphere(HypersphereProto {
            center,
            radius: rng.uniform_in(0.0, 2.0),
        }),
        Variant::Vanilla => Prototype::Hypersphere(HypersphereProto { center, radius: 0.0 }),
        Variant::Cone => Prototype::Cone(ConeProto {
            center,
            angle: rng.uniform_in(-0.8, 0.8),
        }),
        Variant::Gaussian => Prototype::Gaussian(GaussianProto {
            mean: center,
            log_sigma: rng.uniform_in(-0.5, 0.5),
        }),
    }
}

fn protos_from(template: &[Prototype], p: &[f64], d: usize) -> Vec<Prototype> {
    let n = template.len();
    template
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut proto = t.clone();
            *proto.center_mut() = p[k * d..(k + 1) * d].to_vec();
            proto.set_scale(p[n * d + k]);
            proto
        })
        .collect()
}

fn episode(rng: &mut Rng, variant: Variant) -> Option<FdReport> {
    let activation = if rng.below(2) == 0 {
        Activation::Tanh
    } else {
        Activation::Relu
    };
    let (l, d) = (2 + rng.below(3), 2 + rng.below(3));
    let dims = [l, 3 + rng.below(4), d];
    let mut enc = Encoder::mlp(&dims, activation, rng).unwrap();
    let mut params = enc.flat_params();
    params.iter_mut().for_each(|p| *p += rng.uniform_in(-0.2, 0.2));
    enc.set_flat_params(&params).unwrap();

    let n = 2 + rng.below(3);
    let protos: Vec<Prototype> = (0..n).map(|_| random_proto(rng, variant, d)).collect();
    let query: Vec<Item> = (0..n)
        .flat_map(|label| {
            let per_class = 1 + rng.below(3);
            (0..per_class)
                .map(|_| Item {
                    features: uniform_vec(rng, l, -1.5, 1.5),
                    label,
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let tapes: Vec<ForwardTape> = query.iter().map(|q| enc.forward(&q.features).unwrap().1).collect();
    if activation == Activation::Relu && near_relu_kink(&tapes) {
        return None;
    }
    if variant == Variant::Cone {
        let cones: Vec<ConeProto> = protos.iter().filter_map(|p| p.as_cone().cloned()).collect();
        if !cones_clear_of_kinks(&cones) {
            return None;
        }
        for q in &query {
            let f = enc.embed(&q.features).unwrap();
            if norm(&f) < 0.1 {
                return None;
            }
            for c in &cones {
                let theta = angle_between(&f, &c.center).unwrap();
                if (theta - c.angle.abs()).abs() < KINK_MARGIN || theta > PI - KINK_MARGIN {
                    return None;
                }
            }
        }
    }

    let loss = episode_loss(&enc, &protos, &query, variant).unwrap();
    let np = params.len();
    let point = [
        params,
        protos.iter().flat_map(|p| p.center().to_vec()).collect(),
        protos.iter().map(Prototype::scale).collect(),
    ]
    .concat();
    let analytic = [
        loss.encoder_grads.flat_params(),
        loss.center_grads.concat(),
        loss.scale_grads,
    ]
    .concat();
    let value = |p: &[f64]| {
        let mut e = enc.clone();
        e.set_flat_params(&p[..np]).unwrap();
        episode_loss(&e, &protos_from(&protos, &p[np..], d), &query, variant)
            .unwrap()
            .value
    };
    Some(finite_diff_report(value, &point, &analytic, FD_STEP, RESOLVABLE))
}

fn trainer_batch(rng: &mut Rng, mode: TrainMode) -> Option<FdReport> {
    let (l, d, classes) = (3, 3, 4);
    let items: Vec<Item> = (0..classes)
        .flat_map(|label| {
            let offset = uniform_vec(rng, l, -2.0, 2.0);
            (0..6)
                .map(|_| Item {
                    features: offset.iter().map(|o| o + rng.uniform_in(-0.7, 0.7)).collect(),
                    label,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let ds = Dataset::new(items).unwrap();
    let config = TrainConfig {
        n_way: 3,
        k_shot: 2,
        n_query: 2,
        mode,
        ..TrainConfig::default()
    };
    let enc = Encoder::mlp(&[l, 5, d], Activation::Tanh, rng).unwrap();
    let trainer = Trainer::new(config, enc, &ds, rng).unwrap();
    let batch = trainer.sample_batch(&ds, rng).unwrap();
    let grads = trainer.batch_gradients(&batch).unwrap();

    let np = trainer.encoder.param_count();
    let persistent = mode == TrainMode::Persistent;
    let mut point = trainer.encoder.flat_params();
    let mut analytic = grads.encoder_grads.flat_params();
    if persistent {
        for (k, &c) in batch.classes.iter().enumerate() {
            point.extend_from_slice(trainer.store.get(c).center());
            analytic.extend_from_slice(&grads.center_grads[k]);
        }
    }
    for (k, &c) in batch.classes.iter().enumerate() {
        point.push(trainer.store.get(c).scale());
        analytic.push(grads.scale_grads[k]);
    }
    let value = |p: &[f64]| {
        let mut t = trainer.clone();
        t.encoder.set_flat_params(&p[..np]).unwrap();
        let mut rest = &p[np..];
        if persistent {
            for &c in &batch.classes {
                t.store.set_center(c, rest[..d].to_vec()).unwrap();
                rest = &rest[d..];
            }
        }
        for (k, &c) in batch.classes.iter().enumerate() {
            t.store.set_scale(c, rest[k]);
        }
        t.batch_loss(&batch).unwrap()
    };
    Some(finite_diff_report(value, &point, &analytic, FD_STEP, RESOLVABLE))
}
