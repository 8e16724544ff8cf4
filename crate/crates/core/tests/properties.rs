use ltbridge::direct::{default_window, sample_terminal_local_time};
use ltbridge::local_time::{inverse_local_time, LocalTimeTracker};
use ltbridge::model::{bessel3, killed_bm, ou, sq_bessel};
use ltbridge::scale::{conditional_terminal_lt_law, hitting_prob, potential_density};
use ltbridge::stats::{ks_one_sample, ks_two_sample};
use ltbridge::{build_scale, DiffusionSpec, RandomSource};
use proptest::prelude::*;

fn model(kind: u8, p: f64) -> DiffusionSpec {
    match kind % 4 {
        0 => killed_bm(0.5 + p).unwrap(),
        1 => ou(0.2 + p, p - 1.0).unwrap(),
        2 => sq_bessel(2.5 + p).unwrap(),
        _ => bessel3(),
    }
}

/// Away from the saturated tails of a normalized scale.
fn well_conditioned(scale: &ltbridge::ScaleTable, x: f64) -> bool {
    let v = scale.s(x);
    (!scale.s_left.is_finite() || v - scale.s_left > 1e-6)
        && (!scale.s_right.is_finite() || scale.s_right - v > 1e-6)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scale_is_increasing(kind in 0u8..4, p in 0.0f64..2.5) {
        let spec = model(kind, p);
        let scale = build_scale(&spec, 1e-10).unwrap();
        let grid = spec.probe_grid(40);
        for w in grid.windows(2) {
            prop_assert!(scale.s(w[1]) >= scale.s(w[0]));
            if well_conditioned(&scale, w[0]) && well_conditioned(&scale, w[1]) {
                prop_assert!(scale.s(w[1]) > scale.s(w[0]));
                prop_assert!(scale.ds(w[0]) > 0.0);
            }
        }
    }

    #[test]
    fn potential_density_symmetric_and_factorizes(kind in 0u8..4, p in 0.0f64..2.5, i in 0usize..20, j in 0usize..20) {
        let spec = model(kind, p);
        let scale = build_scale(&spec, 1e-10).unwrap();
        let grid = spec.probe_grid(20);
        let (x, y) = (grid[i], grid[j]);
        let uxy = potential_density(&scale, x, y).unwrap();
        prop_assert!(rel_close(uxy, potential_density(&scale, y, x).unwrap(), 1e-12));
        let uyy = potential_density(&scale, y, y).unwrap();
        let psi = hitting_prob(&scale, x, y).unwrap();
        prop_assert!((uxy - psi * uyy).abs() <= 1e-12 * uyy.max(1.0));
    }

    #[test]
    fn terminal_law_has_unit_mass(kind in 0u8..4, p in 0.0f64..2.5, i in 0usize..10, j in 0usize..10, l in 0.0f64..3.0) {
        let spec = model(kind, p);
        let scale = build_scale(&spec, 1e-10).unwrap();
        let grid = spec.probe_grid(10);
        prop_assume!(well_conditioned(&scale, grid[j]));
        let law = conditional_terminal_lt_law(&scale, grid[i], grid[j], l).unwrap();
        prop_assert!((law.total_mass(1e-10) - 1.0).abs() < 1e-6);
        prop_assert!(law.cdf(l - 1e-9) == 0.0);
        for v in [0.1, 0.5, 0.9, 0.999] {
            if v > law.atom_mass {
                prop_assert!((law.cdf(law.quantile(v)) - v).abs() < 1e-9);
            } else {
                prop_assert_eq!(law.quantile(v), l);
            }
        }
    }

    #[test]
    fn ks_invariant_under_monotone_maps(a in prop::collection::vec(-5.0f64..5.0, 50..150), b in prop::collection::vec(-5.0f64..5.0, 50..150)) {
        let two = ks_two_sample(&a, &b).unwrap();
        let ea: Vec<f64> = a.iter().map(|x| x.exp()).collect();
        let eb: Vec<f64> = b.iter().map(|x| x.exp()).collect();
        let mapped = ks_two_sample(&ea, &eb).unwrap();
        prop_assert!((0.0..=1.0).contains(&two.statistic));
        prop_assert!((two.statistic - mapped.statistic).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&two.p_value));

        let cdf = |x: f64| 1.0 / (1.0 + (-x).exp());
        let one = ks_one_sample(&a, cdf).unwrap();
        let one_mapped = ks_one_sample(&ea, |y: f64| cdf(y.ln())).unwrap();
        prop_assert!((0.0..=1.0).contains(&one.statistic));
        prop_assert!((one.statistic - one_mapped.statistic).abs() < 1e-12);
    }

    #[test]
    fn tracker_is_nondecreasing(xs in prop::collection::vec(-0.3f64..0.3, 1..200), eps in 0.01f64..0.2) {
        let mut tr = LocalTimeTracker::new(0.0, eps);
        let mut last = 0.0;
        for x in xs {
            tr.update(x, 1.0, 1e-3);
            prop_assert!(tr.value >= last);
            last = tr.value;
        }
        tr.finish();
        let a1 = 0.3 * last;
        let a2 = 0.7 * last;
        if last > 0.0 {
            prop_assert!(inverse_local_time(&tr.history, a1) <= inverse_local_time(&tr.history, a2));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn terminal_sampler_reproducible(seed in any::<u64>(), index in 0u64..1000) {
        let spec = killed_bm(1.0).unwrap();
        let scale = build_scale(&spec, 1e-10).unwrap();
        let dt: f64 = 1e-3;
        let eps = 2.0 * dt.sqrt();
        let window = default_window(&scale, 0.0, 1.0, 2.0 * eps).unwrap();
        let src = RandomSource::new(seed, index);
        let draw = |s| sample_terminal_local_time(&spec, &scale, 0.0, 0.0, eps, dt, window, s, 50_000_000).unwrap();
        let (a, b) = (draw(src), draw(src));
        prop_assert_eq!(a, b);
        let c = draw(RandomSource::new(seed, index + 1));
        prop_assert!(a.local_time != c.local_time || a.steps != c.steps);
    }
}
