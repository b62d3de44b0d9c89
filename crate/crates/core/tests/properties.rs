use hyperproto::numerics::{safe_arccos, softmax_of_negated, sq_euclidean};
use hyperproto::prototypes::{argmin_first, ConeProto, GaussianProto, HypersphereProto};
use hyperproto::Rng;
use proptest::prelude::*;

fn vec_of(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

fn pair(lo: f64, hi: f64) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(move |d| (vec_of(d, lo, hi), vec_of(d, lo, hi)))
}

#[test]
fn softmax_sums_to_one_on_wide_inputs() {
    let mut rng = Rng::new(11, 0);
    for _ in 0..10_000 {
        let n = 1 + rng.below(10);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1e5, 1e5)).collect();
        let p = softmax_of_negated(&scores).unwrap();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12, "{scores:?} sums to {total}");
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(scores in prop::collection::vec(-1e3f64..1e3, 1..10), c in -1e3f64..1e3) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let a = softmax_of_negated(&scores).unwrap();
        let b = softmax_of_negated(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn arccos_is_monotone_non_increasing(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(safe_arccos(lo).unwrap() >= safe_arccos(hi).unwrap());
    }

    #[test]
    fn squared_distance_is_symmetric((a, b) in pair(-1e3, 1e3)) {
        prop_assert_eq!(sq_euclidean(&a, &b).unwrap(), sq_euclidean(&b, &a).unwrap());
    }

    #[test]
    fn radius_shift_is_linear((f, z) in pair(-10.0, 10.0), eps in -5.0f64..5.0, c in -5.0f64..5.0) {
        let base = HypersphereProto { center: z.clone(), radius: eps }.measure(&f).unwrap().value;
        let moved = HypersphereProto { center: z, radius: eps + c }.measure(&f).unwrap().value;
        prop_assert!((moved - (base - c)).abs() <= 1e-9 * (1.0 + base.abs()), "{moved} vs {}", base - c);
    }

    #[test]
    fn surface_points_measure_zero((f, z) in pair(-10.0, 10.0)) {
        let eps = sq_euclidean(&f, &z).unwrap();
        let m = HypersphereProto { center: z, radius: eps }.measure(&f).unwrap().value;
        prop_assert!(m.abs() <= 1e-12, "{m}");
    }

    #[test]
    fn cone_ignores_embedding_scale((f, z) in pair(-3.0, 3.0), eps in -1.5f64..1.5, alpha in 1e-3f64..1e3) {
        prop_assume!(f.iter().any(|v| v.abs() > 1e-3) && z.iter().any(|v| v.abs() > 1e-3));
        let proto = ConeProto { center: z, angle: eps };
        let scaled: Vec<f64> = f.iter().map(|v| alpha * v).collect();
        let a = proto.measure(&f).unwrap().value;
        let b = proto.measure(&scaled).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn cone_measure_is_bounded((f, z) in pair(-3.0, 3.0), eps in -4.0f64..4.0) {
        prop_assume!(f.iter().any(|v| v.abs() > 1e-6) && z.iter().any(|v| v.abs() > 1e-6));
        let m = ConeProto { center: z, angle: eps }.measure(&f).unwrap().value;
        prop_assert!((-1.0..=1.0).contains(&m), "{m}");
    }

    #[test]
    fn shared_sigma_gaussian_orders_like_distance(
        d in 1usize..6,
        n in 2usize..6,
        log_sigma in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed, 0);
        let f: Vec<f64> = (0..d).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let means: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.uniform_in(-3.0, 3.0)).collect()).collect();
        let nll: Vec<f64> = means
            .iter()
            .map(|m| GaussianProto { mean: m.clone(), log_sigma }.measure(&f).unwrap().value)
            .collect();
        let dist: Vec<f64> = means.iter().map(|m| sq_euclidean(&f, m).unwrap()).collect();
        prop_assert_eq!(argmin_first(&nll), argmin_first(&dist));
    }

    #[test]
    fn hypersphere_init_centers_the_support_on_the_surface(k in 1usize..10, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, 0);
        let support: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.uniform_in(-5.0, 5.0)).collect()).collect();
        let proto = HypersphereProto::from_support(&support).unwrap();
        let mean = support.iter().map(|f| proto.measure(f).unwrap().value).sum::<f64>() / k as f64;
        prop_assert!(mean.abs() <= 1e-10, "{mean}");
        prop_assert!(proto.radius >= 0.0);
    }

    #[test]
    fn forked_streams_replay(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = Rng::new(seed, 0).fork(stream);
        let mut b = Rng::new(seed, 0).fork(stream);
        for _ in 0..16 {
            prop_assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }
}
