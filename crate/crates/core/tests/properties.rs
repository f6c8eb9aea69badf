use dpguard::calibration::{distortion, epsilon_star};
use dpguard::mechanism::{
    alternating_neighbor, dp_ratio_check, modify_with_rng, normalize, partition,
};
use dpguard::{
    choose_epsilon, query_bound, BudgetParams, ConfidenceVector, DefensePolicy, MechanismConfig,
    ModifiedVector,
};
use proptest::prelude::*;

fn simplex(max_k: usize) -> impl Strategy<Value = ConfidenceVector> {
    prop::collection::vec(0.001f64..1.0, 2..=max_k).prop_map(|raw| {
        let total: f64 = raw.iter().sum();
        ConfidenceVector::new(raw.into_iter().map(|x| x / total).collect()).unwrap()
    })
}

/// Dyadic scores over 2^40, so the floating-point sum is exactly 1.
fn exact_simplex(max_k: usize) -> impl Strategy<Value = ConfidenceVector> {
    prop::collection::vec(1u64..(1 << 40), 1..max_k).prop_map(|mut cuts| {
        cuts.push(0);
        cuts.push(1 << 40);
        cuts.sort_unstable();
        let scale = (1u64 << 40) as f64;
        ConfidenceVector::new(
            cuts.windows(2)
                .map(|w| (w[1] - w[0]) as f64 / scale)
                .collect(),
        )
        .unwrap()
    })
}

fn distinct(y: &ConfidenceVector) -> bool {
    let mut s = y.scores().to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[0] < w[1])
}

fn budget() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.1), Just(0.7), Just(1.4), Just(2.0), 0.01f64..20.0]
}

/// `y := normalize(y', eps0)` with `y'` drawn inside `[0, 1)`.
fn constructed() -> impl Strategy<Value = (ModifiedVector, ConfidenceVector, f64)> {
    (prop::collection::vec(0.0f64..0.999, 2..=20), 0.05f64..20.0)
        .prop_filter("modified scores must not be constant", |(s, _)| {
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(0.0, f64::max);
            hi - lo > 0.05
        })
        .prop_map(|(s, eps0)| {
            let yp = ModifiedVector::from_scores(s).unwrap();
            let y = normalize(&yp, eps0).unwrap();
            (yp, y, eps0)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn order_and_argmax_preserved(y in simplex(20), eps in budget(), seed in any::<u64>()) {
        let cfg = MechanismConfig::new(eps).with_seed(seed);
        let yp = modify_with_rng(&y, &cfg, &mut cfg.rng(0)).unwrap();
        let z = normalize(&yp, eps).unwrap();
        let s = y.scores();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] < s[j] {
                    prop_assert!(yp.scores()[i] < yp.scores()[j]);
                    prop_assert!(z.scores()[i] < z.scores()[j]);
                } else if s[i] == s[j] {
                    prop_assert_eq!(yp.scores()[i], yp.scores()[j]);
                }
            }
        }
        prop_assert_eq!(z.argmax_set(), y.argmax_set());
    }

    #[test]
    fn modified_scores_stay_in_their_sub_range(y in simplex(20), eps in budget(), seed in any::<u64>()) {
        prop_assume!(distinct(&y));
        let cfg = MechanismConfig::new(eps).with_seed(seed);
        let part = partition(&y);
        let yp = modify_with_rng(&y, &cfg, &mut cfg.rng(0)).unwrap();
        for (pos, &class) in part.permutation().iter().enumerate() {
            let (start, end) = part.sub_range(pos + 1).unwrap();
            let v = yp.scores()[class];
            prop_assert!(start <= v && v < end, "{} not in [{}, {})", v, start, end);
        }
        let z = normalize(&yp, eps).unwrap();
        prop_assert!(z.scores().iter().all(|&x| x > 0.0 && x < 1.0));
        prop_assert!((z.scores().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn extreme_modified_scores_straddle_uniform(y in exact_simplex(20), eps in budget(), seed in any::<u64>()) {
        prop_assume!(distinct(&y) && y.min() > 0.0);
        let cfg = MechanismConfig::new(eps).with_seed(seed);
        let yp = modify_with_rng(&y, &cfg, &mut cfg.rng(0)).unwrap();
        let inv_k = 1.0 / y.len() as f64;
        prop_assert!(yp.min() < inv_k);
        prop_assert!(yp.max() >= inv_k);
    }

    #[test]
    fn same_seed_same_release(y in simplex(12), seed in any::<u64>(), nonce in any::<u64>()) {
        let cfg = MechanismConfig::new(0.7).with_seed(seed);
        let a = modify_with_rng(&y, &cfg, &mut cfg.rng(nonce)).unwrap();
        let b = modify_with_rng(&y, &cfg, &mut cfg.rng(nonce)).unwrap();
        prop_assert_eq!(a.scores(), b.scores());
    }

    #[test]
    fn shifted_neighbors_respect_the_ratio_bound(
        half_k in 1usize..=10,
        raw in prop::collection::vec(0.01f64..1.0, 20),
        frac in -0.49f64..0.49,
        eps in budget(),
    ) {
        let k = 2 * half_k;
        let total: f64 = raw[..k].iter().sum();
        let y = ConfidenceVector::new(raw[..k].iter().map(|x| x / total).collect()).unwrap();
        prop_assume!(distinct(&y));
        let mut s = y.scores().to_vec();
        s.sort_by(f64::total_cmp);
        let gap = s.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let t = frac * gap;
        let neighbor = alternating_neighbor(&y, t);
        prop_assume!(neighbor.is_ok());
        let neighbor = neighbor.unwrap();
        let cfg = MechanismConfig::new(eps);
        for r in dp_ratio_check(&y, &neighbor, &cfg).unwrap() {
            prop_assert!(r <= eps.exp() * (1.0 + 1e-12), "ratio {} above e^{}", r, eps);
        }
    }

    #[test]
    fn stabilized_normalization_matches_naive(s in prop::collection::vec(0.0f64..0.999, 2..=20), eps in 0.01f64..100.0) {
        let yp = ModifiedVector::from_scores(s.clone()).unwrap();
        prop_assume!(eps * yp.max() <= 50.0);
        let z = normalize(&yp, eps).unwrap();
        let w: Vec<f64> = s.iter().map(|x| (eps * x / 2.0).exp()).collect();
        let total: f64 = w.iter().sum();
        for (got, wi) in z.scores().iter().zip(&w) {
            let naive = wi / total;
            prop_assert!((got - naive).abs() <= 1e-12 * naive, "{} vs {}", got, naive);
        }
    }

    #[test]
    fn fixed_point_recovered((yp, y, eps0) in constructed()) {
        let star = epsilon_star(&y, &yp).unwrap();
        prop_assert!((star.value - eps0).abs() <= 1e-6 * eps0, "{} vs {}", star.value, eps0);
    }

    #[test]
    fn ratios_amplify_above_and_shrink_below((yp, y, eps0) in constructed()) {
        let above = normalize(&yp, 1.5 * eps0).unwrap();
        let below = normalize(&yp, 0.5 * eps0).unwrap();
        let (s, ya, yb) = (yp.scores(), above.scores(), below.scores());
        let yy = y.scores();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] > s[j] {
                    let base = yy[i] / yy[j];
                    prop_assert!(ya[i] / ya[j] > base * (1.0 - 1e-9));
                    prop_assert!(yb[i] / yb[j] < base * (1.0 + 1e-9));
                }
            }
        }
    }

    #[test]
    fn extremes_expand_above_and_contract_below((yp, y, eps0) in constructed(), factor in 1.05f64..4.0) {
        let above = normalize(&yp, factor * eps0).unwrap();
        let below = normalize(&yp, eps0 / factor).unwrap();
        prop_assert!(above.min() < y.min() + 1e-9 && above.max() > y.max() - 1e-9);
        prop_assert!(below.min() > y.min() - 1e-9 && below.max() < y.max() + 1e-9);
    }

    #[test]
    fn distance_grows_away_from_fixed_point((yp, y, eps0) in constructed()) {
        let grid: Vec<f64> = (0..=20).map(|i| 1.0 + 0.25 * i as f64).collect();
        let dist = |e: f64| distortion(&y, &normalize(&yp, e).unwrap()).unwrap().l1;
        let mut prev = 0.0;
        for g in &grid {
            let d = dist(eps0 * g);
            prop_assert!(d >= prev - 1e-9);
            prev = d;
        }
        prev = 0.0;
        for g in &grid {
            let d = dist(eps0 / g);
            prop_assert!(d >= prev - 1e-9);
            prev = d;
        }
    }

    #[test]
    fn policy_choice_lands_on_mandated_side(
        (yp, y, _eps0) in constructed(),
        tau in 0.05f64..0.95,
        c in 0.01f64..50.0,
        u in 0.01f64..50.0,
    ) {
        let star = epsilon_star(&y, &yp).unwrap();
        let policy = DefensePolicy::new(tau, c, u).unwrap();
        let choice = choose_epsilon(&y, &policy, &star);
        if y.max() > tau {
            prop_assert!(choice.epsilon < star.value);
        } else {
            prop_assert!(choice.epsilon > star.value);
        }
    }

    #[test]
    fn query_bound_monotone(eps in 0.01f64..1.0, k in 2usize..20, overall in 0.1f64..50.0, bump in 0.0f64..2.0) {
        let base = query_bound(&BudgetParams::new(eps, k, overall).unwrap());
        prop_assert!(query_bound(&BudgetParams::new(eps, k, overall + bump).unwrap()) >= base);
        prop_assert!(query_bound(&BudgetParams::new(eps + bump / 10.0, k, overall).unwrap()) <= base);
        prop_assert!(query_bound(&BudgetParams::new(eps, k + 1, overall).unwrap()) <= base);
    }

    #[test]
    fn one_answer_at_single_cost(eps in 0.001f64..5.0, k in 2usize..50) {
        let p = BudgetParams::new(eps, k, k as f64 * eps).unwrap();
        prop_assert_eq!(query_bound(&p), 1);
    }
}

#[test]
fn seeded_three_class_draw_is_bitwise_stable() {
    let y = ConfidenceVector::new(vec![0.6, 0.1, 0.3]).unwrap();
    let cfg = MechanismConfig::new(1.0).with_seed(42);
    let a = modify_with_rng(&y, &cfg, &mut cfg.rng(0)).unwrap();
    for _ in 0..5 {
        let b = modify_with_rng(&y, &cfg, &mut cfg.rng(0)).unwrap();
        let bits = |v: &ModifiedVector| v.scores().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
