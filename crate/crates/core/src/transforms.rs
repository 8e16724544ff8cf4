//! Drift transformations around a level `y` and entrance launches of the
//! Bessel-type motions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{
    check_stops, drive, horizon_steps, Barrier, Path, Record, SimOptions, StopReason, StopRule,
    Walker,
};
use crate::error::{Error, Result};
use crate::model::{DiffusionSpec, TransformKind};
use crate::rng::RandomSource;
use crate::scale::{potential_density, End, ScaleTable, Side};

/// Target of the offset launch: `|s(y ± δ) - s(y)| = OFFSET_SCALE_GAP`, so
/// the side scale `-1/(s - s(y))` is at least `1e6` in magnitude.
pub const OFFSET_SCALE_GAP: f64 = 1e-6;

fn in_side(scale: &ScaleTable, y: f64, side: Side, x: f64) -> Result<()> {
    let ok = match side {
        Side::Low => x > scale.left && x < y,
        Side::High => x > y && x < scale.right,
    };
    if ok {
        Ok(())
    } else {
        let (left, right) = match side {
            Side::Low => (scale.left, y),
            Side::High => (y, scale.right),
        };
        Err(Error::Domain { x, left, right })
    }
}

/// `b + σ² ∂ₓu(x, y) / u(x, y)` with the left derivative at `x = y`.
pub fn recurrent_drift(spec: &DiffusionSpec, scale: &ScaleTable, y: f64, x: f64) -> Result<f64> {
    scale.check(x)?;
    scale.check(y)?;
    Ok(recurrent_drift_unchecked(spec, scale, y, x))
}

#[inline]
fn recurrent_drift_unchecked(spec: &DiffusionSpec, scale: &ScaleTable, y: f64, x: f64) -> f64 {
    let sig2 = spec.sigma(x).powi(2);
    let b = spec.b(x);
    let low = x <= y;
    let extra = match (scale.s_left.is_finite(), scale.s_right.is_finite(), low) {
        (true, _, true) => scale.ds(x) / scale.s(x),
        (_, true, false) => -scale.ds(x) / (1.0 - scale.s(x)),
        _ => 0.0,
    };
    b + sig2 * extra
}

/// Drift of the Bessel-type motion on one side of `y`; pushes away from `y`.
pub fn bessel_drift(
    spec: &DiffusionSpec,
    scale: &ScaleTable,
    y: f64,
    side: Side,
    x: f64,
) -> Result<f64> {
    in_side(scale, y, side, x)?;
    Ok(bessel_drift_unchecked(spec, scale, y, x))
}

/// Same expression on both sides: `b + s'σ² / (s(x) - s(y))`.
#[inline]
fn bessel_drift_unchecked(spec: &DiffusionSpec, scale: &ScaleTable, y: f64, x: f64) -> f64 {
    let sig2 = spec.sigma(x).powi(2);
    let gap = scale.s(x) - scale.s(y);
    spec.b(x) + scale.ds(x) * sig2 / gap
}

/// Drift of the side process conditioned to leave its side interval at `y`.
pub fn cond_exit_drift(
    spec: &DiffusionSpec,
    scale: &ScaleTable,
    y: f64,
    side: Side,
    x: f64,
) -> Result<f64> {
    check_cond_exit(scale, side)?;
    in_side(scale, y, side, x)?;
    Ok(cond_exit_unchecked(spec, scale, side, x))
}

fn check_cond_exit(scale: &ScaleTable, side: Side) -> Result<()> {
    match side {
        Side::Low if !scale.s_left.is_finite() => Err(Error::Config(
            "conditioning the low side toward y needs a finite s(l+)".into(),
        )),
        Side::High if !scale.s_right.is_finite() => Err(Error::Config(
            "conditioning the high side toward y needs a finite s(r-)".into(),
        )),
        _ => Ok(()),
    }
}

#[inline]
fn cond_exit_unchecked(spec: &DiffusionSpec, scale: &ScaleTable, side: Side, x: f64) -> f64 {
    let sig2 = spec.sigma(x).powi(2);
    let ratio = match side {
        Side::Low => scale.ds(x) / scale.s(x),
        Side::High => -scale.ds(x) / (1.0 - scale.s(x)),
    };
    spec.b(x) + sig2 * ratio
}

/// A base diffusion with one of the drift transformations applied.
#[derive(Clone, Debug)]
pub struct TransformedSpec {
    pub base: DiffusionSpec,
    pub scale: ScaleTable,
    pub kind: TransformKind,
}

impl TransformedSpec {
    pub fn new(base: DiffusionSpec, scale: ScaleTable, kind: TransformKind) -> Result<Self> {
        let y = kind.level();
        scale.check(y)?;
        match kind {
            TransformKind::CondExitLow { .. } => check_cond_exit(&scale, Side::Low)?,
            TransformKind::CondExitHigh { .. } => check_cond_exit(&scale, Side::High)?,
            _ => {}
        }
        Ok(TransformedSpec { base, scale, kind })
    }

    pub fn level(&self) -> f64 {
        self.kind.level()
    }

    pub fn side(&self) -> Option<Side> {
        match self.kind {
            TransformKind::Recurrent { .. } => None,
            TransformKind::BesselLow { .. } | TransformKind::CondExitLow { .. } => Some(Side::Low),
            TransformKind::BesselHigh { .. } | TransformKind::CondExitHigh { .. } => {
                Some(Side::High)
            }
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        let y = self.level();
        match self.side() {
            None => (self.base.left, self.base.right),
            Some(Side::Low) => (self.base.left, y),
            Some(Side::High) => (y, self.base.right),
        }
    }

    /// Transformed drift; no domain check.
    pub fn drift(&self, x: f64) -> f64 {
        let y = self.level();
        match self.kind {
            TransformKind::Recurrent { .. } => {
                recurrent_drift_unchecked(&self.base, &self.scale, y, x)
            }
            TransformKind::BesselLow { .. } => {
                bessel_drift_unchecked(&self.base, &self.scale, y, x)
            }
            TransformKind::BesselHigh { .. } => {
                bessel_drift_unchecked(&self.base, &self.scale, y, x)
            }
            TransformKind::CondExitLow { .. } => {
                cond_exit_unchecked(&self.base, &self.scale, Side::Low, x)
            }
            TransformKind::CondExitHigh { .. } => {
                cond_exit_unchecked(&self.base, &self.scale, Side::High, x)
            }
        }
    }

    /// The transformed diffusion as a plain spec on its effective domain;
    /// for the conditioned kinds `y` becomes a killing endpoint.
    pub fn as_spec(&self) -> DiffusionSpec {
        let (lo, hi) = self.domain();
        let me = self.clone();
        let mut spec = DiffusionSpec {
            name: format!("{}:{:?}", self.base.name, self.kind),
            left: lo,
            right: hi,
            drift: std::sync::Arc::new(move |x| me.drift(x)),
            sigma: self.base.sigma.clone(),
            closed_form_scale: None,
            anchor: self.base.anchor,
        };
        if !(spec.anchor > lo && spec.anchor < hi) {
            spec.anchor = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo + 1.0,
                _ => hi - 1.0,
            };
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LauncherMode {
    Offset,
    Exact,
}

/// How a Bessel-type motion leaves its entrance boundary `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntranceLauncher {
    pub mode: LauncherMode,
    /// Offset override; `None` solves `|s(y ± δ) - s(y)| = 1e-6`.
    pub delta: Option<f64>,
    /// Exact mode: distance from `y` at which Euler stepping takes over;
    /// `None` keeps the time-changed Bessel-3 construction throughout.
    pub handoff: Option<f64>,
}

impl EntranceLauncher {
    pub fn offset() -> Self {
        EntranceLauncher {
            mode: LauncherMode::Offset,
            delta: None,
            handoff: None,
        }
    }

    pub fn offset_with(delta: f64) -> Self {
        EntranceLauncher {
            delta: Some(delta),
            ..Self::offset()
        }
    }

    pub fn exact() -> Self {
        EntranceLauncher {
            mode: LauncherMode::Exact,
            delta: None,
            handoff: None,
        }
    }

    pub fn exact_hybrid(handoff: f64) -> Self {
        EntranceLauncher {
            handoff: Some(handoff),
            ..Self::exact()
        }
    }

    /// Launch offset for the offset mode.
    pub fn offset_for(&self, scale: &ScaleTable, y: f64, side: Side) -> Result<f64> {
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(Error::Config(format!(
                    "launch offset must be positive, got {d}"
                )));
            }
            in_side(scale, y, side, y + side.sign() * d)?;
            return Ok(d);
        }
        default_offset(scale, y, side)
    }
}

/// Offset solving `|s(y ± δ) - s(y)| = 1e-6`, floored at a few ulps of `y`.
pub fn default_offset(scale: &ScaleTable, y: f64, side: Side) -> Result<f64> {
    let target = scale.s(y) + side.sign() * OFFSET_SCALE_GAP;
    let x = scale.inverse(target)?;
    let floor = 10.0 * f64::EPSILON * y.abs().max(1.0);
    let d = (x - y).abs().max(floor);
    in_side(scale, y, side, y + side.sign() * d)?;
    Ok(d)
}

/// Launches the Bessel-type motion of `ts` from `y`. Path times start at 0.
pub fn launch_entrance(
    ts: &TransformedSpec,
    launcher: EntranceLauncher,
    stops: &[StopRule],
    opts: SimOptions,
    src: RandomSource,
) -> Result<Path> {
    launch_with_noise(ts, launcher, stops, opts, src, src.noise()).map(|(p, _)| p)
}

/// [`launch_entrance`] on a caller-supplied noise stream, which is handed
/// back for further use.
pub fn launch_with_noise(
    ts: &TransformedSpec,
    launcher: EntranceLauncher,
    stops: &[StopRule],
    opts: SimOptions,
    src: RandomSource,
    noise: ChaCha8Rng,
) -> Result<(Path, ChaCha8Rng)> {
    let side = match ts.kind {
        TransformKind::BesselLow { .. } => Side::Low,
        TransformKind::BesselHigh { .. } => Side::High,
        other => {
            return Err(Error::Config(format!(
                "entrance launch needs a Bessel-type transform, got {other:?}"
            )))
        }
    };
    let y = ts.level();
    let opts = opts.singular(y).barrier(Barrier { level: y, side });
    let n_max = horizon_steps(stops, opts.dt);
    let drift = |x: f64| ts.drift(x);
    match launcher.mode {
        LauncherMode::Offset => {
            let d = launcher.offset_for(&ts.scale, y, side)?;
            let mut w = Walker::with_noise(&ts.base, y + side.sign() * d, 0.0, opts, src, noise)?;
            // The recorded path starts at y itself.
            w.set_state(y + side.sign() * d);
            let reason = drive(&mut w, &drift, stops, n_max)?;
            let (mut p, noise) = w.finish(reason);
            p.values[0] = y;
            Ok((p, noise))
        }
        LauncherMode::Exact => {
            exact_launch(ts, side, launcher.handoff, stops, opts, src, noise, n_max)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn exact_launch(
    ts: &TransformedSpec,
    side: Side,
    handoff: Option<f64>,
    stops: &[StopRule],
    opts: SimOptions,
    src: RandomSource,
    mut noise: ChaCha8Rng,
    n_max: u64,
) -> Result<(Path, ChaCha8Rng)> {
    let y = ts.level();
    let sc = &ts.scale;
    let spec = &ts.base;
    let s_y = sc.s(y);
    let dt = opts.dt;
    // Room in scale units before the far endpoint of the side.
    let room = match side {
        Side::High => sc.s_right - s_y,
        Side::Low => s_y - sc.s_left,
    };
    let far_end = match side {
        Side::High => (End::Right, spec.right),
        Side::Low => (End::Left, spec.left),
    };
    let mut times = vec![0.0];
    let mut values = vec![y];
    let mut w3 = [0.0f64; 3];
    let mut r = 0.0;
    let mut x = y;
    let mut t = 0.0;
    let mut steps = 0u64;
    let mut stop = None;
    let mut killed = None;
    let mut lifetime = f64::INFINITY;
    while stop.is_none() {
        if steps >= n_max {
            stop = Some(StopReason::Horizon);
            break;
        }
        if let Some(h) = handoff {
            if (x - y).abs() >= h {
                break;
            }
        }
        // Bessel-time step chosen so the left-point clock advances by dt.
        let rate = (sc.ds(x) * spec.sigma(x)).powi(2);
        let du = dt * rate;
        let sd = du.sqrt();
        for c in w3.iter_mut() {
            let z: f64 = noise.sample(StandardNormal);
            *c += sd * z;
        }
        let r_new = (w3[0] * w3[0] + w3[1] * w3[1] + w3[2] * w3[2]).sqrt();
        steps += 1;
        if r_new >= room {
            if far_end.1.is_finite() {
                let frac = ((room - r) / (r_new - r)).clamp(0.0, 1.0);
                t += frac * dt;
                x = far_end.1;
                killed = Some(far_end.0);
                lifetime = t;
                stop = Some(StopReason::Killed);
            } else {
                t += dt;
                stop = Some(match side {
                    Side::High => StopReason::WindowHigh,
                    Side::Low => StopReason::WindowLow,
                });
            }
            times.push(t);
            values.push(x);
            break;
        }
        let x_prev = x;
        r = r_new;
        x = sc.inverse(s_y + side.sign() * r)?;
        t += dt;
        times.push(t);
        values.push(x);
        stop = check_stops(stops, x_prev, x);
    }
    let mut reflections = 0;
    let mut reason = stop;
    if reason.is_none() {
        let mut wk = Walker::with_noise(spec, x, t, opts.record(Record::Full), src, noise)?;
        wk.steps = steps;
        let remaining = n_max.saturating_sub(steps);
        let drift = |v: f64| ts.drift(v);
        let rs = drive(&mut wk, &drift, stops, remaining)?;
        reason = Some(rs);
        let (tail, back) = wk.finish(rs);
        noise = back;
        reflections = tail.reflections;
        times.extend_from_slice(&tail.times[1..]);
        values.extend_from_slice(&tail.values[1..]);
        killed = tail.exit;
        lifetime = tail.lifetime;
    }
    let mut path = Path {
        times,
        values,
        killed: killed.is_some(),
        lifetime,
        exit: killed,
        stop: reason.unwrap_or(StopReason::Horizon),
        reflections,
        seed: src.seed,
        index: src.index,
    };
    thin(&mut path, opts.record);
    Ok((path, noise))
}

fn thin(path: &mut Path, record: Record) {
    let keep = |i: usize, n: usize| match record {
        Record::Full => true,
        Record::Every(k) => i.is_multiple_of(k) || i + 1 == n,
        Record::Endpoints => i == 0 || i + 1 == n,
    };
    if record == Record::Full {
        return;
    }
    let n = path.times.len();
    let idx: Vec<usize> = (0..n).filter(|&i| keep(i, n)).collect();
    path.times = idx.iter().map(|&i| path.times[i]).collect();
    path.values = idx.iter().map(|&i| path.values[i]).collect();
}

/// Terminal data of one recurrent-transform path for the survival estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSample {
    pub x_end: f64,
    pub local_time: f64,
    pub killed: bool,
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
    /// Paths that hit a boundary, which the transformed process cannot do in
    /// continuous time; they contribute weight 0.
    pub dropped: usize,
}

impl Estimate {
    pub fn from_values(values: &[f64], dropped: usize) -> Result<Estimate> {
        let n = values.len();
        if n < 2 {
            return Err(Error::Degenerate(format!(
                "need at least 2 samples, got {n}"
            )));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(Estimate {
            mean,
            se: (var / n as f64).sqrt(),
            n,
            dropped,
        })
    }
}

/// Importance-sampling estimate of `P^x(ζ > T)` from recurrent-transform
/// paths: `u(x,y) · mean[ exp(-s'(y) L̂_T / (2u(y,y))) / u(X_T, y) ]`.
pub fn survival_estimator(
    scale: &ScaleTable,
    y: f64,
    x: f64,
    horizon: f64,
    paths: &[SurvivalSample],
) -> Result<Estimate> {
    let u_x = potential_density(scale, x, y)?;
    if horizon == 0.0 {
        return Ok(Estimate {
            mean: 1.0,
            se: 0.0,
            n: paths.len(),
            dropped: 0,
        });
    }
    if paths.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let u_yy = potential_density(scale, y, y)?;
    let k = scale.ds(y) / (2.0 * u_yy);
    let mut dropped = 0;
    let vals: Vec<f64> = paths
        .iter()
        .map(|p| {
            if p.killed || !scale.contains(p.x_end) {
                dropped += 1;
                return Ok(0.0);
            }
            let u_end = potential_density(scale, p.x_end, y)?;
            Ok(u_x / u_end * (-k * p.local_time).exp())
        })
        .collect::<Result<_>>()?;
    Estimate::from_values(&vals, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bm_drift, killed_bm, sq_bessel};
    use crate::scale::build_scale;

    fn setup(spec: DiffusionSpec) -> (DiffusionSpec, ScaleTable) {
        let sc = build_scale(&spec, 1e-10).unwrap();
        (spec, sc)
    }

    #[test]
    fn killed_bm_recurrent_drift() {
        let (spec, sc) = setup(killed_bm(1.0).unwrap());
        for x in [0.1, 0.5, 0.9] {
            let d = recurrent_drift(&spec, &sc, 0.0, x).unwrap();
            assert!((d + 1.0 / (1.0 - x)).abs() < 1e-12);
        }
        assert_eq!(recurrent_drift(&spec, &sc, 0.0, -0.7).unwrap(), 0.0);
        // Left derivative at the level itself.
        assert_eq!(recurrent_drift(&spec, &sc, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn sq_bessel_recurrent_drift_vanishes_above() {
        let (spec, sc) = setup(sq_bessel(4.0).unwrap());
        for x in [1.5, 3.0, 10.0] {
            assert!(recurrent_drift(&spec, &sc, 1.0, x).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn bessel_drift_examples() {
        let (spec, sc) = setup(killed_bm(1.0).unwrap());
        assert!((bessel_drift(&spec, &sc, 0.0, Side::High, 0.25).unwrap() - 4.0).abs() < 1e-12);
        assert!(bessel_drift(&spec, &sc, 0.0, Side::High, -0.25).is_err());
        let (spec, sc) = setup(sq_bessel(4.0).unwrap());
        let y = 1.7;
        for x in [1.8, 2.5, 6.0] {
            let want = 4.0 + 4.0 * y / (x - y);
            assert!((bessel_drift(&spec, &sc, y, Side::High, x).unwrap() - want).abs() < 1e-9);
        }
        let (spec, sc) = setup(bm_drift(0.0, 0.0, 1.0).unwrap());
        let d = bessel_drift(&spec, &sc, 0.3, Side::High, 0.5).unwrap();
        assert!((d - 1.0 / 0.2).abs() < 1e-6);
    }

    #[test]
    fn cond_exit_examples() {
        let (spec, sc) = setup(bm_drift(0.0, 0.0, 1.0).unwrap());
        let d = cond_exit_drift(&spec, &sc, 0.0, Side::High, 0.4).unwrap();
        assert!((d + 1.0 / 0.6).abs() < 1e-6);
        let (spec, sc) = setup(killed_bm(1.0).unwrap());
        assert!(matches!(
            cond_exit_drift(&spec, &sc, 0.0, Side::Low, -0.5),
            Err(Error::Config(_))
        ));
        for x in [0.1, 0.5, 0.95] {
            assert!(cond_exit_drift(&spec, &sc, 0.0, Side::High, x).unwrap() < 0.0);
        }
    }

    #[test]
    fn killed_bm_reflected_is_bessel_three_recurrent_transform() {
        // U = b - Y has drift 1{U<b}/U when Y follows the recurrent transform at 0.
        let b = 1.0;
        let (spec, sc) = setup(killed_bm(b).unwrap());
        for u in [0.05, 0.3, 0.99, 1.2, 2.5] {
            let y_val = b - u;
            let drift_u = -recurrent_drift(&spec, &sc, 0.0, y_val).unwrap();
            let want = if u < b { 1.0 / u } else { 0.0 };
            assert!((drift_u - want).abs() < 1e-12, "u={u}");
        }
    }

    #[test]
    fn offset_solves_scale_gap() {
        let (_, sc) = setup(killed_bm(1.0).unwrap());
        let d = default_offset(&sc, 0.0, Side::High).unwrap();
        assert!((d - 1e-6).abs() < 1e-15);
        let (_, sc) = setup(sq_bessel(4.0).unwrap());
        let d = default_offset(&sc, 2.0, Side::High).unwrap();
        assert!((sc.s(2.0 + d) - sc.s(2.0) - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn survival_at_zero_horizon_is_one() {
        let (_, sc) = setup(killed_bm(1.0).unwrap());
        let e = survival_estimator(&sc, 0.0, 0.0, 0.0, &[]).unwrap();
        assert_eq!(e.mean, 1.0);
    }

    #[test]
    fn exact_launch_of_killed_bm_is_bessel_three() {
        let (spec, sc) = setup(killed_bm(1.0).unwrap());
        let ts = TransformedSpec::new(spec, sc, TransformKind::BesselHigh { y: 0.0 }).unwrap();
        let p = launch_entrance(
            &ts,
            EntranceLauncher::exact(),
            &[StopRule::Horizon { t: 0.05 }],
            SimOptions::new(1e-4),
            RandomSource::new(5, 0),
        )
        .unwrap();
        // Identity time change: uniform unit-rate grid, path is the radial
        // part of a 3-d Brownian motion.
        assert_eq!(p.times.len(), 501);
        assert!(p.values[1..].iter().all(|&v| v > 0.0));
        let mut rng = RandomSource::new(5, 0).noise();
        let mut w = [0.0f64; 3];
        for c in w.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *c += 1e-2 * z;
        }
        let r1 = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        assert!((p.values[1] - r1).abs() < 1e-15);
    }
}
