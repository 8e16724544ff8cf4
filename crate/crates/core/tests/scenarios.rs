use ltbridge::bridge::{
    lt_independence_check, sample_bridge, sample_decomposition, BridgeConfig, Target,
};
use ltbridge::direct::{default_window, sample_terminal_local_time, snapshot};
use ltbridge::engine::{simulate, Record, StopRule};
use ltbridge::model::{bm_drift, killed_bm, sq_bessel};
use ltbridge::rng::par_map;
use ltbridge::scale::End;
use ltbridge::stats::{ks_one_sample, mean_se};
use ltbridge::{build_scale, SimOptions};
use statrs::distribution::{ContinuousCDF, Normal};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

#[test]
fn brownian_moments_at_one() {
    let spec = bm_drift(0.0, f64::NEG_INFINITY, f64::INFINITY).unwrap();
    let opts = SimOptions::new(1e-3).record(Record::Endpoints);
    let stops = [StopRule::Horizon { t: 1.0 }];
    let ends: Vec<f64> = par_map(21, 4000, |src| {
        simulate(&spec, &|_| 0.0, 0.0, &stops, opts, src)
    })
    .unwrap()
    .iter()
    .map(|p| p.end_value())
    .collect();
    let (mean, se) = mean_se(&ends);
    let var = ends.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (ends.len() - 1) as f64;
    assert!(mean.abs() < 4.0 * se, "{mean}");
    assert!((var - 1.0).abs() < 4.0 * (2.0 / 4000f64).sqrt(), "{var}");
}

#[test]
fn killed_bm_first_passage() {
    let spec = killed_bm(1.0).unwrap();
    let n = 4000;
    let opts = SimOptions::new(1e-3)
        .record(Record::Endpoints)
        .bridge_correction(true);
    let paths = par_map(22, n, |src| {
        simulate(
            &spec,
            &|_| 0.0,
            0.0,
            &[StopRule::Horizon { t: 4.0 }, StopRule::BoundaryExit],
            opts,
            src,
        )
    })
    .unwrap();
    let nd = std_normal();
    let levy = |t: f64| 2.0 * (1.0 - nd.cdf(1.0 / t.sqrt()));

    let by_one = paths
        .iter()
        .filter(|p| p.killed && p.lifetime <= 1.0)
        .count() as f64
        / n as f64;
    let exact = levy(1.0);
    assert!((exact - 0.317_310_507_862_914_1).abs() < 1e-9, "{exact}");
    let se = (exact * (1.0 - exact) / n as f64).sqrt();
    assert!((by_one - exact).abs() < 4.0 * se, "{by_one}");

    let lifetimes: Vec<f64> = paths
        .iter()
        .filter(|p| p.killed)
        .map(|p| p.lifetime)
        .collect();
    let total = levy(4.0);
    let ks = ks_one_sample(&lifetimes, |t| {
        if t <= 0.0 {
            0.0
        } else {
            (levy(t) / total).min(1.0)
        }
    })
    .unwrap();
    assert!(ks.p_value > 1e-3, "{ks:?}");
}

/// `E L^a_1 = E|W_1 - a| - |a|`, averaged over the band.
fn band_average_local_time(eps: f64) -> f64 {
    let nd = std_normal();
    let phi = |a: f64| (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let el = |a: f64| 2.0 * phi(a) + a * (2.0 * nd.cdf(a) - 1.0) - a.abs();
    let m = 2000;
    let h = 2.0 * eps / m as f64;
    let mut sum = el(-eps) + el(eps);
    for k in 1..m {
        sum += if k % 2 == 1 { 4.0 } else { 2.0 } * el(-eps + k as f64 * h);
    }
    sum * h / 3.0 / (2.0 * eps)
}

#[test]
fn band_oracle_kink() {
    // sqrt(2/pi) minus the band average of |a|.
    let eps = 1e-4;
    let v = band_average_local_time(eps);
    assert!((v - (0.7978845608028654 - 0.5 * eps)).abs() < 1e-8, "{v}");
}

#[test]
fn brownian_local_time_mean() {
    let spec = bm_drift(0.0, f64::NEG_INFINITY, f64::INFINITY).unwrap();
    let dt: f64 = 1e-4;
    let eps = 5.0 * dt.sqrt();
    let opts = SimOptions::new(dt);
    let lts: Vec<f64> = par_map(23, 4000, |src| {
        snapshot(&spec, &|_| 0.0, 0.0, 0.0, eps, 1.0, opts, src)
    })
    .unwrap()
    .iter()
    .map(|s| s.local_time)
    .collect();
    let (mean, se) = mean_se(&lts);
    let oracle = band_average_local_time(eps);
    assert!(
        (mean - oracle).abs() < 4.0 * se,
        "{mean} vs {oracle} (se {se})"
    );
}

#[test]
fn fixed_level_bridge_reaches_level() {
    let spec = killed_bm(1.0).unwrap();
    let scale = build_scale(&spec, 1e-10).unwrap();
    let dt: f64 = 1e-3;
    let cfg = BridgeConfig::new(0.0, Target::Fixed { a: 1.0 }, dt).record(Record::Endpoints);
    let step_lt = dt / (2.0 * cfg.eps_for(&spec));
    let results = par_map(24, 100, |src| Ok(sample_bridge(&spec, &scale, &cfg, src))).unwrap();
    let outcomes: Vec<_> = results.into_iter().filter_map(|r| r.ok()).collect();
    assert!(outcomes.len() >= 90, "{}", outcomes.len());
    for o in &outcomes {
        assert!(o.switch_time.is_finite());
        assert!(o.lt_at_switch >= 1.0 && o.lt_at_switch <= 1.0 + step_lt + 1e-12);
        assert_eq!(o.theta, 1);
        assert_eq!(o.exit_side, Some(End::Right));
    }
}

#[test]
fn zero_level_bridge_switches_immediately() {
    let spec = killed_bm(1.0).unwrap();
    let scale = build_scale(&spec, 1e-10).unwrap();
    let cfg = BridgeConfig::new(0.0, Target::Fixed { a: 0.0 }, 1e-3).record(Record::Endpoints);
    let outcomes = par_map(25, 50, |src| sample_bridge(&spec, &scale, &cfg, src)).unwrap();
    for o in &outcomes {
        assert_eq!(o.switch_time, 0.0);
        assert_eq!(o.theta, 1);
        assert_eq!(o.exit_side, Some(End::Right));
    }
}

#[test]
fn sq_bessel_decomposition_goes_up() {
    let spec = sq_bessel(4.0).unwrap();
    let scale = build_scale(&spec, 1e-10).unwrap();
    let outcomes = par_map(26, 60, |src| {
        sample_decomposition(&spec, &scale, 1.0, 1.0, 1e-3, src)
    })
    .unwrap();
    assert!(outcomes.iter().all(|o| o.theta == 1));
}

#[test]
fn killed_bm_independence_is_inconclusive() {
    let spec = killed_bm(1.0).unwrap();
    let scale = build_scale(&spec, 1e-10).unwrap();
    let dt: f64 = 1e-3;
    let eps = 2.0 * dt.sqrt();
    let window = default_window(&scale, 0.0, 1.0, 2.0 * eps).unwrap();
    let samples = par_map(27, 200, |src| {
        sample_terminal_local_time(&spec, &scale, 0.0, 0.0, eps, dt, window, src, 50_000_000)
    })
    .unwrap();
    assert!(samples.iter().all(|s| s.exit == Some(End::Right)));
    let entry = lt_independence_check("killed BM", &samples, true, 0.01).unwrap();
    assert!(entry.inconclusive);
}
