use proptest::prelude::*;

use warm_core::align::{gaussian_kl, item_from_logits, GaussianPolicy};
use warm_core::combine::{ensemble_reward, weight_average};
use warm_core::linalg::{norm, sub, Mat};
use warm_core::net::{forward, NetShape, Weights};
use warm_core::synth::{gen_preference_data, make_feature_bank, Item, Split, WorldSpec};
use warm_core::theory::{ens_limit, wa_limit, TheoryWorld};
use warm_core::{Reward, RngState};

fn perturbed(base: &Weights, eps: f64, r: &mut RngState) -> Weights {
    let mut w = base.clone();
    for v in w.values.iter_mut() {
        *v += eps * r.normal();
    }
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wa_limit_never_exceeds_ens(p in prop::collection::vec(0.0f64..=1.0, 1..8), n in 0.0f64..3.0) {
        let world = TheoryWorld { p: p.clone(), z_norms: vec![n; p.len()], sigma: 0.0, dim: 8 };
        prop_assert!(wa_limit(&world, 1.0).unwrap() <= ens_limit(&world, 1.0).unwrap());
        prop_assert!(wa_limit(&world, -1.0).unwrap() >= ens_limit(&world, -1.0).unwrap());
    }

    #[test]
    fn gaussian_kl_nonnegative(
        a in prop::collection::vec((-3.0f64..3.0, -2.0f64..1.0), 1..6),
        shift in prop::collection::vec((-3.0f64..3.0, -2.0f64..1.0), 6),
    ) {
        let p = GaussianPolicy::new(a.iter().map(|v| v.0).collect(), a.iter().map(|v| v.1).collect()).unwrap();
        let q = GaussianPolicy::new(
            shift[..a.len()].iter().map(|v| v.0).collect(),
            shift[..a.len()].iter().map(|v| v.1).collect(),
        ).unwrap();
        prop_assert!(gaussian_kl(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn weight_average_ignores_member_order(seed in any::<u64>(), m in 2usize..5, rot in 0usize..5) {
        let shape = NetShape::new(6, 3).unwrap();
        let mut r = RngState::new(seed);
        let members: Vec<Weights> = (0..m).map(|_| Weights::random(shape, &mut r)).collect();
        let refs: Vec<&Weights> = members.iter().collect();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot % m);
        rotated.swap(0, m - 1);
        let a = weight_average(&refs, None).unwrap();
        let b = weight_average(&rotated, None).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn allocations_stay_on_simplex(logits in prop::collection::vec(-30.0f64..30.0, 8), seed in any::<u64>()) {
        let spec = WorldSpec::default();
        let bank = make_feature_bank(&spec, &mut RngState::new(1)).unwrap();
        let item = item_from_logits(&spec, &bank, &logits, &mut RngState::new(seed));
        let total: f64 = item.intensities.iter().sum();
        prop_assert!((total - spec.budget).abs() <= 1e-9);
        prop_assert!(item.intensities.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn forward_is_lipschitz(seed in any::<u64>(), step in 1e-3f64..2.0) {
        let shape = NetShape::new(10, 7).unwrap();
        let mut r = RngState::new(seed);
        let w = Weights::random(shape, &mut r);
        let x: Vec<f64> = (0..10).map(|_| r.normal()).collect();
        let x2: Vec<f64> = x.iter().map(|v| v + step * r.normal()).collect();
        let item = |x: Vec<f64>| Item { x, intensities: vec![], y: 1.0 };
        let w1 = Mat::from_vec(7, 10, w.w1().to_vec()).unwrap();
        let bound = norm(w.head()) * w1.spectral_norm() * norm(&sub(&x, &x2));
        let gap = (forward(&w, &item(x)).unwrap() - forward(&w, &item(x2)).unwrap()).abs();
        prop_assert!(gap <= bound * (1.0 + 1e-6) + 1e-12, "gap {} bound {}", gap, bound);
    }
}

#[test]
fn wa_ens_difference_is_second_order() {
    let spec = WorldSpec::default();
    let bank = make_feature_bank(&spec, &mut RngState::new(5)).unwrap();
    let data = gen_preference_data(&spec, &bank, 200, Split::IdVal, &mut RngState::new(6)).unwrap();
    let shape = NetShape::new(spec.input_dim(), 32).unwrap();
    let base = Weights::random(shape, &mut RngState::new(7));
    let scales = [1e-1, 1e-2, 1e-3];
    let mut logs = Vec::new();
    for &eps in &scales {
        // Same directions at every scale.
        let mut r = RngState::new(8);
        let a = perturbed(&base, eps, &mut r);
        let b = perturbed(&base, eps, &mut r);
        let wa = weight_average(&[&a, &b], None).unwrap();
        let mean_gap: f64 = data
            .iter()
            .map(|p| (wa.reward(&p.item_plus) - ensemble_reward(&[&a, &b], None, &p.item_plus).unwrap()).abs())
            .sum::<f64>()
            / data.len() as f64;
        logs.push((eps.ln(), mean_gap.ln()));
    }
    let mx = logs.iter().map(|v| v.0).sum::<f64>() / 3.0;
    let my = logs.iter().map(|v| v.1).sum::<f64>() / 3.0;
    let slope = logs.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum::<f64>()
        / logs.iter().map(|v| (v.0 - mx).powi(2)).sum::<f64>();
    assert!(slope >= 1.8, "slope {slope}");
}
