use amopt::distributions::{gaussian_kl, log_prob, sample_reparam, PolicyParams, Squash};
use amopt::envs::EnvKind;
use amopt::objective::{pessimistic_q, Temperature};
use proptest::prelude::*;

proptest! {
    #[test]
    fn pessimism_never_increases_with_beta(
        qs in prop::collection::vec(-100.0f64..100.0, 1..6),
        b1 in 0.0f64..5.0,
        extra in 0.0f64..5.0,
    ) {
        let lo = pessimistic_q(&qs, b1).unwrap();
        let hi = pessimistic_q(&qs, b1 + extra).unwrap();
        prop_assert!(hi <= lo + 1e-12, "beta {b1} -> {lo}, beta {} -> {hi}", b1 + extra);
    }

    #[test]
    fn temperature_stays_positive(
        alpha in 1e-3f64..10.0,
        lr in 1e-4f64..0.5,
        entropies in prop::collection::vec(-50.0f64..50.0, 1..200),
    ) {
        let mut t = Temperature::for_action_dim(alpha, lr, 2).unwrap();
        for h in entropies {
            let a = t.update(h).unwrap();
            prop_assert!(a > 0.0 && a.is_finite());
        }
    }

    #[test]
    fn squashed_samples_have_finite_density(
        mu in prop::collection::vec(-10.0f64..10.0, 1..4),
        log_sigma in prop::collection::vec(-20.0f64..2.0, 4),
        noise in prop::collection::vec(-6.0f64..6.0, 4),
    ) {
        let d = mu.len();
        let p = PolicyParams::from_log_sigma(mu, &log_sigma[..d]).unwrap();
        let s = sample_reparam(&p, &noise[..d], Squash::Tanh).unwrap();
        prop_assert!(s.a.iter().all(|x| x.abs() <= 1.0));
        prop_assert!(log_prob(&p, &s, Squash::Tanh).unwrap().is_finite());
    }

    #[test]
    fn gaussian_kl_is_nonnegative_and_zero_on_self(
        flat in prop::collection::vec(-3.0f64..3.0, 4),
        other in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let p = PolicyParams::from_flat(&flat).unwrap();
        let q = PolicyParams::from_flat(&other).unwrap();
        prop_assert!(gaussian_kl(&p, &q) >= 0.0);
        prop_assert!(gaussian_kl(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn episodes_are_pure_functions_of_the_seed(seed in 0u64..1000, which in 0usize..3) {
        let env = [EnvKind::MultiModalBandit, EnvKind::PointMassTwoGoals, EnvKind::PendulumSwingUp][which];
        let run = |seed| {
            let mut state = env.reset_seeded(seed);
            let mut out = Vec::new();
            for k in 0..env.spec().horizon.min(20) {
                let a: Vec<f64> = (0..env.spec().action_dim).map(|i| ((k + i) as f64 * 0.37).sin()).collect();
                let r = env.step(&state, &a).unwrap();
                out.push(r.reward.to_bits());
                if r.done {
                    break;
                }
                state = r.next;
            }
            out
        };
        prop_assert_eq!(run(seed), run(seed));
    }
}
