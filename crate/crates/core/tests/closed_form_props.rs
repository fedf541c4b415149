use optexec::closed_form::{
    brute_force_optimal, expected_profit, optimal_strategy, twap_strategy, Strategy as Schedule,
};
use optexec::experiments::Preset;
use optexec::market::{DecayKernel, KernelFamily};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(n_steps: usize) -> Vec<f64> {
    (0..=n_steps).map(|k| k as f64).collect()
}

fn any_kernel() -> impl Strategy<Value = DecayKernel> {
    (
        prop::sample::select(vec![
            KernelFamily::Exponential,
            KernelFamily::PowerLaw,
            KernelFamily::LinearResilience,
        ]),
        0.1..5.0f64,
        0.01..2.0f64,
    )
        .prop_map(|(family, kappa, rho)| DecayKernel::new(family, kappa, rho).unwrap())
}

#[test]
fn two_step_exponential_schedule() {
    let k = DecayKernel::exponential(1.0, 1.0).unwrap();
    let xi = optimal_strategy(&k, &grid(2), 10.0).unwrap();
    for (got, want) in xi.trades.iter().zip([-3.7992, -2.4016, -3.7992]) {
        assert!((got - want).abs() < 1e-4);
    }
    let bf = brute_force_optimal(&k, &grid(2), 10.0, 1e-6).unwrap();
    for (a, b) in xi.trades.iter().zip(&bf.trades) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn published_kernels_agree_with_brute_force() {
    let start = std::time::Instant::now();
    for p in Preset::ALL {
        let k = p.kernel();
        for n in 1..=2 {
            let xi = optimal_strategy(&k, &grid(n), 10.0).unwrap();
            let bf = brute_force_optimal(&k, &grid(n), 10.0, 1e-6).unwrap();
            for (a, b) in xi.trades.iter().zip(&bf.trades) {
                assert!((a - b).abs() < 1e-4, "{} N={n}: {a} vs {b}", p.name());
            }
        }
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn published_kernels_give_palindromic_selling_schedules() {
    for p in Preset::ALL {
        let xi = optimal_strategy(&p.kernel(), &grid(9), 10.0)
            .unwrap()
            .trades;
        for k in 0..xi.len() {
            assert!((xi[k] - xi[xi.len() - 1 - k]).abs() < 1e-9, "{}", p.name());
            // linear kernels are convex but not strictly, so interior
            // trades may be zero up to rounding
            let strict = p.kernel().family != KernelFamily::LinearResilience;
            let bound = if strict { 0.0 } else { 1e-12 * 10.0 };
            assert!(xi[k] < bound, "{}: {}", p.name(), xi[k]);
        }
    }
}

#[test]
fn beats_random_admissible_schedules() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for p in Preset::ALL {
        let k = p.kernel();
        let g = grid(9);
        let best = expected_profit(&k, &g, &optimal_strategy(&k, &g, 10.0).unwrap(), 50.0).unwrap();
        assert!(best >= expected_profit(&k, &g, &twap_strategy(10.0, 9), 50.0).unwrap());
        for _ in 0..100 {
            let w: Vec<f64> = (0..10).map(|_| rng.random_range(-0.5..1.5)).collect();
            let total: f64 = w.iter().sum();
            let s = Schedule::new(w.iter().map(|v| -10.0 * v / total).collect());
            assert!(expected_profit(&k, &g, &s, 50.0).unwrap() <= best + 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn kappa_does_not_change_the_schedule(k in any_kernel(), scale in 0.01..100.0f64, n in 1usize..15) {
        let scaled = DecayKernel { kappa: k.kappa * scale, ..k };
        let a = optimal_strategy(&k, &grid(n), 10.0).unwrap();
        let b = optimal_strategy(&scaled, &grid(n), 10.0).unwrap();
        for (x, y) in a.trades.iter().zip(&b.trades) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule_is_linear_in_inventory(k in any_kernel(), x0 in 0.1..1000.0f64, n in 1usize..15) {
        let unit = optimal_strategy(&k, &grid(n), 1.0).unwrap();
        let doubled = optimal_strategy(&k, &grid(n), 2.0 * x0).unwrap();
        let single = optimal_strategy(&k, &grid(n), x0).unwrap();
        for ((u, d), s) in unit.trades.iter().zip(&doubled.trades).zip(&single.trades) {
            // power-of-two scaling is exact in binary floating point
            prop_assert_eq!(*d, 2.0 * s);
            prop_assert!((s - x0 * u).abs() <= 1e-12 * x0);
        }
        prop_assert!((single.liquidated() - x0).abs() <= 1e-12 * x0 * n as f64);
    }

    #[test]
    fn strictly_convex_kernels_are_persymmetric(rho in 0.05..3.0f64, n in 1usize..20) {
        for k in [DecayKernel::exponential(1.0, rho).unwrap(), DecayKernel::power_law(1.0, rho).unwrap()] {
            let xi = optimal_strategy(&k, &grid(n), 10.0).unwrap().trades;
            for i in 0..xi.len() {
                prop_assert!((xi[i] - xi[xi.len() - 1 - i]).abs() < 1e-9);
            }
        }
    }
}
