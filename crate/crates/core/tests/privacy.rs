use dpfl::dp::{
    calibrate_sigma, clip_per_sample, epsilon_for_steps, make_private, noisy_aggregate,
    private_training_step, steps_per_epoch, NoiseSpec, PrivacyLedger, PrivacySpec, Sampling,
    StepSeeds, DEFAULT_ORDERS,
};
use dpfl::matrix::Matrix;
use dpfl::nn::{init_model, GradientSet, ModelParams};
use dpfl::optim::OptimizerState;
use proptest::prelude::*;

fn orders() -> Vec<u32> {
    DEFAULT_ORDERS.collect()
}

fn grad_from(values: &[f64]) -> GradientSet {
    let mut g = ModelParams::zeros(&[values.len(), 1]);
    for (v, x) in g.values_mut().zip(values) {
        *v = *x;
    }
    g
}

#[test]
fn noise_std_matches_sigma_c_over_batch() {
    let clipped = vec![grad_from(&[0.3, -0.2]), grad_from(&[0.1, 0.4])];
    let like = ModelParams::zeros(&[2, 1]);
    let mean = noisy_aggregate(&clipped, &like, 1.0, 0.0, 100.0, 0).unwrap();
    let mean: Vec<f64> = mean.values().collect();
    let trials = 100_000u64;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for seed in 0..trials {
        let g = noisy_aggregate(&clipped, &like, 1.0, 1.0, 100.0, seed).unwrap();
        for (i, v) in g.values().enumerate() {
            let d = v - mean[i];
            sum[i] += d;
            sq[i] += d * d;
        }
    }
    for i in 0..3 {
        let m = sum[i] / trials as f64;
        let std = (sq[i] / trials as f64 - m * m).sqrt();
        assert!(
            (std - 0.01).abs() / 0.01 < 0.03,
            "coordinate {i}: std {std}"
        );
    }
}

#[test]
fn noise_is_deterministic_per_seed() {
    let like = init_model(&[4, 3, 1], 0).unwrap();
    let a = noisy_aggregate(&[], &like, 0.5, 2.0, 8.0, 77).unwrap();
    let b = noisy_aggregate(&[], &like, 0.5, 2.0, 8.0, 77).unwrap();
    assert_eq!(a, b);
}

#[test]
fn doubling_steps_needs_more_noise() {
    let q = 32.0 / 303.0;
    let a = calibrate_sigma(3.0, 1e-5, q, 250).unwrap();
    let b = calibrate_sigma(3.0, 1e-5, q, 500).unwrap();
    assert!(b > a, "{a} vs {b}");
}

#[test]
fn ledger_length_is_epochs_times_steps() {
    let n = 50;
    let x = Matrix::from_rows(
        &(0..n)
            .map(|i| vec![i as f64 / n as f64])
            .collect::<Vec<_>>(),
    );
    let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let mut params = init_model(&[1, 3, 1], 2).unwrap();
    let cfg = make_private(&PrivacySpec::target(2.0), n, 10, 3).unwrap();
    let mut opt = OptimizerState::sgd(0.1);
    let mut ledger = PrivacyLedger::new();
    let steps = 3 * steps_per_epoch(n, 10);
    for s in 0..steps as u64 {
        let idx: Vec<usize> = (0..10).map(|i| (s as usize * 10 + i) % n).collect();
        private_training_step(
            &mut params,
            &x.select_rows(&idx),
            &idx.iter().map(|&i| y[i]).collect::<Vec<_>>(),
            &cfg,
            10.0,
            0.0,
            &mut opt,
            &mut ledger,
            StepSeeds {
                dropout: s,
                noise: s,
            },
        )
        .unwrap();
    }
    assert_eq!(ledger.len(), 15);
    assert!(ledger.epsilon(1e-5).unwrap().0 <= 2.0);
}

#[test]
fn multiplier_spec_skips_calibration() {
    let spec = PrivacySpec {
        noise: NoiseSpec::Multiplier(1.3),
        delta: 1e-5,
        clip_norm: 0.5,
        sampling: Sampling::Fixed,
    };
    let cfg = make_private(&spec, 100, 10, 4).unwrap();
    assert_eq!(cfg.noise_multiplier, 1.3);
    assert_eq!(cfg.target_epsilon, None);
    assert_eq!(cfg.warnings(100).len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn clipping_bounds_norm_and_keeps_small_gradients(
        values in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 1..12), 1..8),
        clip in 0.01f64..50.0,
    ) {
        let width = values[0].len();
        let grads: Vec<GradientSet> = values
            .iter()
            .map(|v| grad_from(&v.iter().cycle().take(width).copied().collect::<Vec<_>>()))
            .collect();
        let (clipped, norms) = clip_per_sample(&grads, clip).unwrap();
        for ((c, g), n) in clipped.iter().zip(&grads).zip(&norms) {
            prop_assert!(c.l2_norm() <= clip + 1e-12);
            if *n <= clip {
                prop_assert_eq!(c, g);
            }
        }
    }

    #[test]
    fn epsilon_is_monotone(
        q in 0.001f64..0.5,
        sigma in 0.5f64..5.0,
        steps in 1u64..2000,
        delta_exp in 3i32..10,
    ) {
        let o = orders();
        let delta = 10f64.powi(-delta_exp);
        let base = epsilon_for_steps(q, sigma, steps, delta, &o).unwrap().0;
        prop_assert!(epsilon_for_steps(q, sigma, steps + 1, delta, &o).unwrap().0 >= base);
        prop_assert!(epsilon_for_steps((q * 1.1).min(1.0), sigma, steps, delta, &o).unwrap().0 >= base);
        prop_assert!(epsilon_for_steps(q, sigma * 1.1, steps, delta, &o).unwrap().0 <= base);
        prop_assert!(epsilon_for_steps(q, sigma, steps, delta / 10.0, &o).unwrap().0 >= base);
        prop_assert!(epsilon_for_steps(q, sigma, 2 * steps, delta, &o).unwrap().0 <= 2.0 * base);
    }
}
