//! Property tests for the protocol, comparison and numeric invariants.

use forwardbench::bench::{relative_delta, round_half_away, Stat};
use forwardbench::data::wrong_label;
use forwardbench::ops::{cross_entropy, softmax};
use forwardbench::search::{early_stop_step, random_search, EarlyStopPolicy, LogRange, SearchSpace, StopDecision};
use forwardbench::telemetry::{level_shifts, plateaus, ResourceSample};
use forwardbench::RngState;
use proptest::prelude::*;

fn policy() -> impl Strategy<Value = EarlyStopPolicy> {
    (1usize..6, 0.0f64..0.05, 1usize..30).prop_map(|(patience, min_delta, max_epochs)| EarlyStopPolicy {
        patience,
        min_delta,
        max_epochs,
    })
}

proptest! {
    #[test]
    fn delta_of_equal_metrics_is_zero(x in 1e-3f64..1e6) {
        prop_assert_eq!(relative_delta(Some(x), Some(x)), Some(0.0));
    }

    #[test]
    fn delta_sign_follows_ordering(a in 1e-3f64..1e6, b in 1e-3f64..1e6) {
        let d = relative_delta(Some(a), Some(b)).unwrap();
        prop_assert_eq!(d > 0.0, a > b);
        prop_assert!(d > -100.0);
    }

    #[test]
    fn delta_is_unit_free(a in 1e-3f64..1e4, b in 1e-3f64..1e4, k in 1e-3f64..1e3) {
        let d = relative_delta(Some(a), Some(b)).unwrap();
        let dk = relative_delta(Some(a * k), Some(b * k)).unwrap();
        prop_assert!((d - dk).abs() <= 1e-9 * d.abs().max(1.0));
    }

    #[test]
    fn delta_without_baseline_is_none(a in 0.0f64..10.0) {
        prop_assert_eq!(relative_delta(Some(a), Some(0.0)), None);
        prop_assert_eq!(relative_delta(Some(a), None), None);
        prop_assert_eq!(relative_delta(None, Some(a + 1.0)), None);
    }

    #[test]
    fn rounding_is_odd_and_close(x in -1e5f64..1e5, dec in 0i32..4) {
        let r = round_half_away(x, dec);
        prop_assert_eq!(round_half_away(-x, dec), -r);
        prop_assert!((r - x).abs() <= 0.5 * 10f64.powi(-dec) + x.abs() * 1e-11);
    }

    #[test]
    fn best_epoch_is_earliest_maximum(p in policy(), h in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let s = early_stop_step(&p, &h).unwrap();
        let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(h[s.best_index], max);
        prop_assert!(h[..s.best_index].iter().all(|&v| v < max));
    }

    #[test]
    fn stopping_respects_budget(p in policy(), h in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let s = early_stop_step(&p, &h).unwrap();
        if h.len() >= p.max_epochs {
            prop_assert_eq!(s.decision, StopDecision::Stop);
        }
        if s.decision == StopDecision::Stop && h.len() < p.max_epochs {
            // Only a run of stale epochs can end training early.
            prop_assert!(h.len() > p.patience);
            prop_assert!(h.len() - 1 - s.best_index >= p.patience || p.min_delta > 0.0);
        }
    }

    #[test]
    fn improving_history_never_stops_early(n in 1usize..30, extra in 1usize..5) {
        let p = EarlyStopPolicy { patience: 1, min_delta: 0.0, max_epochs: n + extra };
        let h: Vec<f64> = (0..n).map(|i| i as f64).collect();
        prop_assert_eq!(early_stop_step(&p, &h).unwrap().decision, StopDecision::Continue);
    }

    #[test]
    fn search_picks_the_best_trial(seed in any::<u64>(), n in 1usize..12, fail_every in 2usize..5) {
        let space = SearchSpace { lr: LogRange { min: 1e-4, max: 1e-1 }, ff_theta: Some((0.5, 3.0)), ..SearchSpace::default() };
        let mut calls = 0usize;
        let out = random_search(&space, n, &mut RngState::new(seed), |p, trial_seed| {
            calls += 1;
            if calls % fail_every == 0 {
                return Err(forwardbench::Error::Protocol("synthetic failure".into()));
            }
            Ok((p.lr * 1e3).sin() + (trial_seed % 7) as f64)
        }).unwrap();
        prop_assert_eq!(out.trials.len(), n);
        for t in &out.trials {
            prop_assert!(t.params.lr >= 1e-4 && t.params.lr <= 1e-1);
            prop_assert!(space.batch_sizes.contains(&t.params.batch_size));
            let theta = t.params.ff_theta.unwrap();
            prop_assert!((0.5..=3.0).contains(&theta));
        }
        let best = out.best_trial().unwrap();
        prop_assert!(out.trials.iter().all(|t| t.objective <= best.objective));
        prop_assert!(out.trials.iter().filter(|t| t.result.is_none()).all(|t| t.objective == f64::NEG_INFINITY));
    }

    #[test]
    fn search_plan_depends_only_on_seed(seed in any::<u64>(), n in 1usize..8) {
        let space = SearchSpace::default();
        let run = || random_search(&space, n, &mut RngState::new(seed), |p, s| Ok(p.lr + s as f64 * 0.0)).unwrap();
        let (a, b) = (run(), run());
        for (x, y) in a.trials.iter().zip(&b.trials) {
            prop_assert_eq!(&x.params, &y.params);
            prop_assert_eq!(x.seed, y.seed);
        }
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-500.0f64..500.0, 1..20)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.0).collect();
        let q = softmax(&shifted);
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_is_nonnegative(z in prop::collection::vec(-50.0f64..50.0, 2..12), pick in any::<prop::sample::Index>()) {
        let p = softmax(&z);
        let y = pick.index(z.len());
        prop_assert!(cross_entropy(&p, y).unwrap() >= 0.0);
    }

    #[test]
    fn wrong_label_is_wrong_and_in_range(label in 0usize..10, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        for _ in 0..20 {
            let w = wrong_label(label, 10, &mut rng);
            prop_assert!(w < 10 && w != label);
        }
    }

    #[test]
    fn stat_of_constant_has_no_spread(x in -1e3f64..1e3, n in 1usize..10) {
        let s = Stat::of(&vec![x; n]).unwrap();
        prop_assert!((s.mean - x).abs() < 1e-9);
        prop_assert!(s.std <= 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn step_trace_recovers_its_levels(levels in prop::collection::vec(1u64..50, 1..6), hold in 5usize..20) {
        // Levels 1 MiB apart or more, a few KiB of jitter.
        let mib = 1u64 << 20;
        let mut distinct = levels.clone();
        distinct.dedup();
        let mut samples = Vec::new();
        for (i, &l) in distinct.iter().enumerate() {
            for j in 0..hold {
                let jitter = ((i * 31 + j * 17) % 7) as u64 * 1024;
                samples.push(ResourceSample { t_s: samples.len() as f64 * 0.01, rss_bytes: Some(100 * mib + l * mib + jitter), power_w: 0.0 });
            }
        }
        let found = plateaus(&samples, 64.0 * 1024.0, 3);
        prop_assert_eq!(found.len(), distinct.len());
        let shifts = level_shifts(&found, 0.5 * mib as f64);
        prop_assert_eq!(shifts.len(), distinct.len() - 1);
        for (s, w) in shifts.iter().zip(distinct.windows(2)) {
            let want = (w[1] as f64 - w[0] as f64) * mib as f64;
            prop_assert!((s - want).abs() < 8.0 * 1024.0);
        }
    }
}
