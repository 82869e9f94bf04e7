mod common;

use common::{gae_bruteforce, h_lower, mc_mixture_entropy, random_mixture};
use gas_core::models::NetOutput;
use gas_core::numcore::{gradcheck, Rng, Tape, Tensor};
use gas_core::objectives::{aggregate_entropy, kl_divergence, loss_h, pointwise_entropy, LossWeights};
use gas_core::rlteacher::{compute_gae, normalize_advantages, ppo_policy_loss};
use proptest::prelude::*;

fn probs_strategy(b: usize, m: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, m), b).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect()
    })
}

fn categorical(tape: &mut Tape, rows: &[Vec<f64>]) -> NetOutput {
    NetOutput::from_probs(tape, Tensor::from_rows(rows).unwrap())
}

fn entropies(rows: &[Vec<f64>]) -> (f64, f64) {
    let mut tape = Tape::new();
    let out = categorical(&mut tape, rows);
    let pw = pointwise_entropy(&mut tape, &out).unwrap();
    let pw = tape.mean(pw).unwrap();
    let agg = aggregate_entropy(&mut tape, &out).unwrap();
    (tape.item(pw), tape.item(agg))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn categorical_entropy_bounds(rows in (1usize..8, 2usize..6).prop_flat_map(|(b, m)| probs_strategy(b, m))) {
        let m = rows[0].len() as f64;
        let (pw, agg) = entropies(&rows);
        prop_assert!(pw >= -1e-12 && pw <= m.ln() + 1e-12);
        prop_assert!(agg <= m.ln() + 1e-12);
        // entropy is concave: the mixture is at least as uncertain as its parts
        prop_assert!(agg >= pw - 1e-12);
    }

    #[test]
    fn aggregate_entropy_ignores_row_order(rows in (2usize..8, 2usize..5).prop_flat_map(|(b, m)| probs_strategy(b, m)), seed in any::<u64>()) {
        let mut shuffled = rows.clone();
        Rng::new(seed).shuffle(&mut shuffled);
        prop_assert!((entropies(&rows).1 - entropies(&shuffled).1).abs() < 1e-12);
        let (mean, std) = random_mixture(&mut Rng::new(seed), rows.len(), 3);
        let mut order: Vec<usize> = (0..mean.len()).collect();
        Rng::new(seed ^ 1).shuffle(&mut order);
        let pm: Vec<_> = order.iter().map(|&i| mean[i].clone()).collect();
        let ps: Vec<_> = order.iter().map(|&i| std[i].clone()).collect();
        prop_assert!((h_lower(&mean, &std) - h_lower(&pm, &ps)).abs() < 1e-10);
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self(
        (p, q) in (1usize..6, 2usize..6).prop_flat_map(|(b, m)| (probs_strategy(b, m), probs_strategy(b, m))),
        temperature in 0.5f64..4.0,
    ) {
        let mut tape = Tape::new();
        let (tp, tq) = (categorical(&mut tape, &p), categorical(&mut tape, &q));
        let kl = kl_divergence(&mut tape, &tp, &tq, temperature).unwrap();
        let same = kl_divergence(&mut tape, &tp, &tp, temperature).unwrap();
        prop_assert!(tape.item(kl) >= -1e-12);
        prop_assert!(tape.item(same).abs() < 1e-12);
    }

    #[test]
    fn gaussian_kl_nonnegative(seed in any::<u64>(), b in 1usize..5, m in 1usize..4) {
        let mut rng = Rng::new(seed);
        let (m1, s1) = random_mixture(&mut rng, b, m);
        let (m2, s2) = random_mixture(&mut rng, b, m);
        let mut tape = Tape::new();
        let t = NetOutput::from_gaussian(&mut tape, Tensor::from_rows(&m1).unwrap(), Tensor::from_rows(&s1).unwrap());
        let s = NetOutput::from_gaussian(&mut tape, Tensor::from_rows(&m2).unwrap(), Tensor::from_rows(&s2).unwrap());
        let kl = kl_divergence(&mut tape, &t, &s, 1.0).unwrap();
        let zero = kl_divergence(&mut tape, &t, &t, 1.0).unwrap();
        prop_assert!(tape.item(kl) >= -1e-12);
        prop_assert!(tape.item(zero).abs() < 1e-12);
    }

    #[test]
    fn gae_matches_bruteforce(
        steps in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, prop::bool::weighted(0.2)), 1..10),
        boot in -2.0f64..2.0,
        discount in 0.5f64..1.0,
        lambda in 0.0f64..1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = compute_gae(&r, &v, &d, boot, discount, lambda);
        let oracle = gae_bruteforce(&r, &v, &d, boot, discount, lambda);
        for t in 0..r.len() {
            prop_assert!((adv[t] - oracle[t]).abs() < 1e-12);
            prop_assert!((ret[t] - adv[t] - v[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_advantages(adv in prop::collection::vec(-100.0f64..100.0, 2..64)) {
        prop_assume!(adv.iter().any(|a| (a - adv[0]).abs() > 1e-3));
        let mut a = adv.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((std - 1.0).abs() < 1e-10);
    }

    #[test]
    fn ppo_loss_ignores_advantage_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = Rng::new(seed);
        let b = 8;
        let rows: Vec<Vec<f64>> = (0..b).map(|_| { let p = 0.05 + 0.9 * rng.uniform(); vec![p, 1.0 - p] }).collect();
        let actions = Tensor::new([b, 1], (0..b).map(|_| rng.below(2) as f64).collect()).unwrap();
        let old: Vec<f64> = (0..b).map(|_| -0.7 + 0.3 * rng.normal()).collect();
        let raw: Vec<f64> = (0..b).map(|_| rng.normal()).collect();
        let loss = |adv: &[f64]| {
            let mut a = adv.to_vec();
            normalize_advantages(&mut a);
            let mut tape = Tape::new();
            let out = categorical(&mut tape, &rows);
            let (l, _) = ppo_policy_loss(&mut tape, &out, &actions, &old, &a, 0.2).unwrap();
            tape.item(l)
        };
        let shifted: Vec<f64> = raw.iter().map(|a| a + shift).collect();
        prop_assert!((loss(&raw) - loss(&shifted)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn h_lower_below_monte_carlo(seed in any::<u64>(), b in 1usize..=8, m in 1usize..=4) {
        let mut rng = Rng::new(seed);
        let (mean, std) = random_mixture(&mut rng, b, m);
        let (mc, se) = mc_mixture_entropy(&mean, &std, 20_000, &mut rng);
        prop_assert!(h_lower(&mean, &std) <= mc + 3.0 * se, "H_lower above MC estimate");
    }

    #[test]
    fn entropy_loss_gradients(seed in any::<u64>(), b in 1usize..6, m in 1usize..4) {
        let mut rng = Rng::new(seed);
        let mean = rng.normal_tensor([b, m], 1.0);
        let log_std = rng.normal_tensor([b, m], 0.3);
        let w = LossWeights::default();
        let report = gradcheck(
            |tape, leaves| {
                let out = NetOutput::Gaussian { mean: leaves[0], log_std: leaves[1], hidden: None };
                Ok(loss_h(tape, &out, &w)?.total)
            },
            &[mean, log_std],
        ).unwrap();
        prop_assert!(report.passed, "max rel error {:e}", report.max_rel_error);
    }
}

#[test]
fn single_gaussian_bound_is_exact() {
    let mut rng = Rng::new(11);
    for m in 1..=4 {
        let (mean, std) = random_mixture(&mut rng, 1, m);
        // 1/2 log |4 pi C| for C = diag(std^2)
        let want: f64 = std[0].iter().map(|s| 0.5 * (4.0 * std::f64::consts::PI * s * s).ln()).sum();
        assert!((h_lower(&mean, &std) - want).abs() < 1e-9);
    }
}
