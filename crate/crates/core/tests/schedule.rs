use compdiff::schedule::{cfg_combine, ddim_step, q_sample};
use compdiff::{ImageGrid, NoiseSchedule, RngStream};
use proptest::prelude::*;

fn grid(seed: u64, lane: &'static str) -> ImageGrid {
    RngStream::new(seed, lane, 0, 0).normal_grid(4, 5, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cfg_with_equal_predictions_is_identity(seed in any::<u64>(), scale in -10.0f64..10.0) {
        let a = grid(seed, "eps");
        prop_assert_eq!(cfg_combine(&a, &a, scale).unwrap(), a);
    }

    #[test]
    fn alpha_bars_are_a_decreasing_product(t in 1usize..400, lo in 1e-5f64..1e-3, span in 1e-4f64..0.05) {
        let s = NoiseSchedule::linear(t, lo, lo + span).unwrap();
        let mut prod = 1.0;
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for k in 1..=t {
            prod *= 1.0 - s.beta(k);
            prop_assert!((s.alpha_bar(k) - prod).abs() <= 1e-12 * prod.max(1e-300) + 1e-15);
            prop_assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        }
    }

    #[test]
    fn deterministic_ddim_is_pure(seed in any::<u64>(), t in 2usize..=1000) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let (x, e) = (grid(seed, "x"), grid(seed, "e"));
        let a = ddim_step(&x, t, t / 2, &e, 0.0, &RngStream::new(1, "a", 0, 0), &s).unwrap();
        let b = ddim_step(&x, t, t / 2, &e, 0.0, &RngStream::new(2, "b", 9, 9), &s).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn forward_noise_has_the_scheduled_variance() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let x0 = ImageGrid::filled(10, 10, 3, 0.7);
    for t in [1, 250, 999] {
        let ab = s.alpha_bar(t);
        let mut residuals = Vec::new();
        for i in 0..40 {
            let eps = RngStream::new(i, "forward", t as u64, 0).normal_like(&x0);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            residuals.extend(xt.data().iter().map(|v| v - ab.sqrt() * 0.7));
        }
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "t={t}: {var} vs {}", 1.0 - ab);
    }
}
