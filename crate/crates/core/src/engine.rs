//! Euler–Maruyama stepping with boundary killing, stop rules and recording.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local_time::LocalTimeTracker;
use crate::model::DiffusionSpec;
use crate::rng::RandomSource;
use crate::scale::{End, Side};

/// One Euler–Maruyama step.
pub fn step(x: f64, drift_val: f64, sigma_val: f64, dt: f64, z: f64) -> Result<f64> {
    if !(dt > 0.0) || !(sigma_val >= 0.0) {
        return Err(Error::Numeric {
            t: f64::NAN,
            x,
            what: format!("step needs dt > 0 and sigma >= 0 (dt={dt}, sigma={sigma_val})"),
        });
    }
    let next = x + drift_val * dt + sigma_val * dt.sqrt() * z;
    if next.is_finite() && x.is_finite() && drift_val.is_finite() && z.is_finite() {
        Ok(next)
    } else {
        Err(Error::Numeric {
            t: f64::NAN,
            x,
            what: format!("non-finite step input (drift={drift_val}, sigma={sigma_val}, z={z})"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum StopRule {
    Horizon {
        t: f64,
    },
    HitLevel {
        z: f64,
        tol: f64,
    },
    LocalTimeReached {
        level: f64,
        eps: f64,
        a: f64,
    },
    /// Run until killed at a boundary.
    BoundaryExit,
    /// Stop on leaving `(lo, hi)`; used to decide the side of escape to an
    /// infinite or unreachable endpoint.
    Window {
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Horizon,
    HitLevel,
    LocalTimeReached,
    Killed,
    WindowLow,
    WindowHigh,
    StepBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Record {
    Full,
    Every(usize),
    Endpoints,
}

/// Reflection at a level that the path must not cross (entrance launches).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Barrier {
    pub level: f64,
    pub side: Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub dt: f64,
    /// Drift magnitude cap; `None` means `1/√dt`.
    pub drift_cap: Option<f64>,
    /// Kill with the Brownian-bridge crossing probability between grid points.
    pub bridge_correction: bool,
    pub record: Record,
    /// Level where a non-finite drift is expected; replaced by the signed cap.
    pub singular_level: Option<f64>,
    pub barrier: Option<Barrier>,
    /// Reflect grid crossings of finite endpoints instead of killing, for
    /// transformed processes that cannot reach them.
    pub reflect_ends: bool,
    pub max_steps: u64,
}

impl SimOptions {
    pub fn new(dt: f64) -> Self {
        SimOptions {
            dt,
            drift_cap: None,
            bridge_correction: false,
            record: Record::Full,
            singular_level: None,
            barrier: None,
            reflect_ends: false,
            max_steps: 200_000_000,
        }
    }

    pub fn record(mut self, record: Record) -> Self {
        self.record = record;
        self
    }

    pub fn bridge_correction(mut self, on: bool) -> Self {
        self.bridge_correction = on;
        self
    }

    pub fn singular(mut self, level: f64) -> Self {
        self.singular_level = Some(level);
        self
    }

    pub fn barrier(mut self, barrier: Barrier) -> Self {
        self.barrier = Some(barrier);
        self
    }

    pub fn reflect_ends(mut self, on: bool) -> Self {
        self.reflect_ends = on;
        self
    }

    pub fn cap(&self) -> f64 {
        self.drift_cap.unwrap_or(1.0 / self.dt.sqrt())
    }

    pub fn check(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if let Record::Every(0) = self.record {
            return Err(Error::Config("record stride must be positive".into()));
        }
        Ok(())
    }
}

/// A discretized trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub killed: bool,
    /// Killing time, `+∞` when not killed.
    pub lifetime: f64,
    pub exit: Option<End>,
    pub stop: StopReason,
    pub reflections: u32,
    pub seed: u64,
    pub index: u64,
}

impl Path {
    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn end_value(&self) -> f64 {
        *self.values.last().unwrap_or(&f64::NAN)
    }

    /// Linear interpolation of the recorded path at `t`; `None` when `t` lies
    /// past the end of the path (killed or stopped earlier).
    pub fn state_at(&self, t: f64) -> Option<f64> {
        if self.times.is_empty() || t < 0.0 || t > self.end_time() {
            return None;
        }
        if self.killed && t >= self.lifetime {
            return None;
        }
        let i = self.times.partition_point(|&s| s <= t);
        if i == 0 {
            return Some(self.values[0]);
        }
        if i == self.times.len() {
            return Some(self.end_value());
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let (x0, x1) = (self.values[i - 1], self.values[i]);
        if t1 == t0 {
            return Some(x1);
        }
        Some(x0 + (x1 - x0) * (t - t0) / (t1 - t0))
    }

    /// Concatenates `tail`, whose first point must coincide in time with the
    /// end of `self`.
    pub fn append(&mut self, tail: &Path) {
        let skip = usize::from(!tail.times.is_empty() && self.end_time() == tail.times[0]);
        self.times.extend_from_slice(&tail.times[skip..]);
        self.values.extend_from_slice(&tail.values[skip..]);
        self.killed = tail.killed;
        self.lifetime = tail.lifetime;
        self.exit = tail.exit;
        self.stop = tail.stop;
        self.reflections += tail.reflections;
    }
}

/// Outcome of one engine step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Advance {
    Moved { x_prev: f64, x: f64 },
    Killed { x_prev: f64, end: End },
}

/// Step-by-step integrator over one path. The drift may be swapped between
/// steps, which is how two-phase samplers are assembled.
pub struct Walker<'a> {
    pub spec: &'a DiffusionSpec,
    pub opts: SimOptions,
    pub t: f64,
    pub x: f64,
    pub steps: u64,
    pub killed: Option<End>,
    pub lifetime: f64,
    pub reflections: u32,
    noise: ChaCha8Rng,
    source: RandomSource,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl<'a> Walker<'a> {
    pub fn new(
        spec: &'a DiffusionSpec,
        x0: f64,
        t0: f64,
        opts: SimOptions,
        src: RandomSource,
    ) -> Result<Self> {
        Self::with_noise(spec, x0, t0, opts, src, src.noise())
    }

    /// Continues on an existing noise stream.
    pub fn with_noise(
        spec: &'a DiffusionSpec,
        x0: f64,
        t0: f64,
        opts: SimOptions,
        src: RandomSource,
        noise: ChaCha8Rng,
    ) -> Result<Self> {
        opts.check()?;
        if !(x0 >= spec.left && x0 <= spec.right) || !x0.is_finite() {
            return Err(Error::Domain {
                x: x0,
                left: spec.left,
                right: spec.right,
            });
        }
        Ok(Walker {
            spec,
            opts,
            t: t0,
            x: x0,
            steps: 0,
            killed: None,
            lifetime: f64::INFINITY,
            reflections: 0,
            noise,
            source: src,
            times: vec![t0],
            values: vec![x0],
        })
    }

    pub fn into_noise(self) -> ChaCha8Rng {
        self.noise
    }

    pub fn draw_normal(&mut self) -> f64 {
        self.noise.sample(StandardNormal)
    }

    fn drift_value(&self, drift: &dyn Fn(f64) -> f64) -> Result<f64> {
        let cap = self.opts.cap();
        let b = drift(self.x);
        if b.is_finite() {
            return Ok(b.clamp(-cap, cap));
        }
        if let Some(level) = self.opts.singular_level {
            if b.is_infinite() || (self.x - level).abs() <= self.opts.dt {
                let sign = match (self.opts.barrier, b) {
                    (Some(bar), _) => bar.side.sign(),
                    (None, v) if v.is_infinite() => v.signum(),
                    _ => 0.0,
                };
                return Ok(sign * cap);
            }
        }
        Err(Error::Numeric {
            t: self.t,
            x: self.x,
            what: format!("drift evaluated to {b}"),
        })
    }

    /// One step with a fresh normal draw.
    pub fn advance(&mut self, drift: &dyn Fn(f64) -> f64) -> Result<Advance> {
        let z = self.draw_normal();
        self.advance_with(drift, z)
    }

    /// One step driven by the supplied standard normal `z`.
    pub fn advance_with(&mut self, drift: &dyn Fn(f64) -> f64, z: f64) -> Result<Advance> {
        if let Some(end) = self.killed {
            return Ok(Advance::Killed {
                x_prev: self.x,
                end,
            });
        }
        let dt = self.opts.dt;
        let x_prev = self.x;
        let b = self.drift_value(drift)?;
        let sig = self.spec.sigma(x_prev);
        let mut next = step(x_prev, b, sig, dt, z).map_err(|e| match e {
            Error::Numeric { x, what, .. } => Error::Numeric { t: self.t, x, what },
            other => other,
        })?;
        if let Some(bar) = self.opts.barrier {
            let wrong = match bar.side {
                Side::High => next <= bar.level,
                Side::Low => next >= bar.level,
            };
            if wrong {
                next = 2.0 * bar.level - next;
                if next == bar.level {
                    next = bar.level + bar.side.sign() * f64::EPSILON * (1.0 + bar.level.abs());
                }
                self.reflections += 1;
            }
        }
        self.steps += 1;
        let (l, r) = (self.spec.left, self.spec.right);
        if self.opts.reflect_ends && (next <= l || next >= r) {
            let edge = if next <= l { l } else { r };
            next = 2.0 * edge - next;
            if !(next > l && next < r) {
                next = 0.5 * (x_prev + edge);
            }
            self.reflections += 1;
        }
        let crossed = if next <= l {
            Some((End::Left, l, (x_prev - l) / (x_prev - next)))
        } else if next >= r {
            Some((End::Right, r, (r - x_prev) / (next - x_prev)))
        } else if self.opts.bridge_correction {
            self.bridge_kill(x_prev, next, sig)
        } else {
            None
        };
        if let Some((end, edge, frac)) = crossed {
            let t_hit = self.t + dt * frac.clamp(0.0, 1.0);
            self.t = t_hit;
            self.x = edge;
            self.killed = Some(end);
            self.lifetime = t_hit;
            self.push(true);
            return Ok(Advance::Killed { x_prev, end });
        }
        self.t += dt;
        self.x = next;
        self.push(false);
        Ok(Advance::Moved { x_prev, x: next })
    }

    fn bridge_kill(&mut self, x0: f64, x1: f64, sig: f64) -> Option<(End, f64, f64)> {
        let var = sig * sig * self.opts.dt;
        for (end, edge) in [(End::Left, self.spec.left), (End::Right, self.spec.right)] {
            if !edge.is_finite() {
                continue;
            }
            let p = (-2.0 * (edge - x0) * (edge - x1) / var).exp();
            let u: f64 = self.noise.random();
            if u < p {
                return Some((end, edge, 1.0));
            }
        }
        None
    }

    fn push(&mut self, last: bool) {
        let keep = match self.opts.record {
            Record::Full => true,
            Record::Every(k) => last || self.steps.is_multiple_of(k as u64),
            Record::Endpoints => last,
        };
        if keep {
            self.times.push(self.t);
            self.values.push(self.x);
        }
    }

    /// Records the current state if the recording mode skipped it.
    pub fn mark(&mut self) {
        if self.times.last() != Some(&self.t) {
            self.times.push(self.t);
            self.values.push(self.x);
        }
    }

    /// Moves the state without stepping (phase handoffs).
    pub fn set_state(&mut self, x: f64) {
        self.x = x;
        if let Some(v) = self.values.last_mut() {
            if self.times.last() == Some(&self.t) {
                *v = x;
                return;
            }
        }
        self.times.push(self.t);
        self.values.push(x);
    }

    pub fn finish(mut self, stop: StopReason) -> (Path, ChaCha8Rng) {
        self.mark();
        let path = Path {
            times: self.times,
            values: self.values,
            killed: self.killed.is_some(),
            lifetime: self.lifetime,
            exit: self.killed,
            stop,
            reflections: self.reflections,
            seed: self.source.seed,
            index: self.source.index,
        };
        (path, self.noise)
    }
}

/// Simulates from `x0` under `drift` until the first stop rule fires or the
/// path is killed at an accessible boundary.
pub fn simulate(
    spec: &DiffusionSpec,
    drift: &dyn Fn(f64) -> f64,
    x0: f64,
    stops: &[StopRule],
    opts: SimOptions,
    src: RandomSource,
) -> Result<Path> {
    simulate_observed(spec, drift, x0, stops, opts, src, &mut |_, _, _| false).map(|(p, _)| p)
}

/// Like [`simulate`], also calling `observer(t_prev, x_prev, x)` after each
/// step; returning `true` stops the path. Returns the tracker when a
/// local-time stop rule was present.
#[allow(clippy::type_complexity)]
pub fn simulate_observed(
    spec: &DiffusionSpec,
    drift: &dyn Fn(f64) -> f64,
    x0: f64,
    stops: &[StopRule],
    opts: SimOptions,
    src: RandomSource,
    observer: &mut dyn FnMut(f64, f64, f64) -> bool,
) -> Result<(Path, Option<LocalTimeTracker>)> {
    if stops.is_empty() {
        return Err(Error::Config("at least one stop rule is required".into()));
    }
    let mut w = Walker::new(spec, x0, 0.0, opts, src)?;
    let mut tracker = None;
    for rule in stops {
        if let StopRule::LocalTimeReached { level, eps, a } = *rule {
            tracker = Some(LocalTimeTracker::new(level, eps).with_target(a));
        }
    }
    let n_horizon = horizon_steps(stops, opts.dt);
    let immediate = stops.iter().find_map(|r| match *r {
        StopRule::HitLevel { z, tol } if (x0 - z).abs() <= tol => Some(StopReason::HitLevel),
        StopRule::LocalTimeReached { a, .. } if a <= 0.0 => Some(StopReason::LocalTimeReached),
        StopRule::Window { lo, .. } if x0 <= lo => Some(StopReason::WindowLow),
        StopRule::Window { hi, .. } if x0 >= hi => Some(StopReason::WindowHigh),
        _ => None,
    });
    if let Some(reason) = immediate {
        let (p, _) = w.finish(reason);
        return Ok((p, tracker));
    }
    if n_horizon == 0 {
        let (p, _) = w.finish(StopReason::Horizon);
        return Ok((p, tracker));
    }
    let reason = loop {
        let t_prev = w.t;
        let adv = w.advance(drift)?;
        let (x_prev, x) = match adv {
            Advance::Killed { x_prev, .. } => {
                if let Some(tr) = tracker.as_mut() {
                    tr.update(x_prev, spec.sigma(x_prev), w.t - t_prev);
                }
                break StopReason::Killed;
            }
            Advance::Moved { x_prev, x } => (x_prev, x),
        };
        if let Some(tr) = tracker.as_mut() {
            tr.update(x_prev, spec.sigma(x_prev), opts.dt);
            if tr.reached().is_some() {
                break StopReason::LocalTimeReached;
            }
        }
        if observer(t_prev, x_prev, x) {
            break StopReason::HitLevel;
        }
        if let Some(r) = check_stops(stops, x_prev, x) {
            break r;
        }
        if w.steps >= n_horizon {
            break StopReason::Horizon;
        }
        if w.steps >= opts.max_steps {
            break StopReason::StepBudget;
        }
    };
    if let Some(tr) = tracker.as_mut() {
        tr.finish();
    }
    let (p, _) = w.finish(reason);
    Ok((p, tracker))
}

/// Stop rule triggered by a step from `x_prev` to `x`, if any (horizon and
/// local-time rules are handled by the caller).
pub fn check_stops(stops: &[StopRule], x_prev: f64, x: f64) -> Option<StopReason> {
    stops.iter().find_map(|rule| match *rule {
        StopRule::HitLevel { z, tol } if (x - z).abs() <= tol || (x_prev - z) * (x - z) < 0.0 => {
            Some(StopReason::HitLevel)
        }
        StopRule::Window { lo, .. } if x <= lo => Some(StopReason::WindowLow),
        StopRule::Window { hi, .. } if x >= hi => Some(StopReason::WindowHigh),
        _ => None,
    })
}

/// Number of steps of length `dt` in the tightest horizon rule.
pub fn horizon_steps(stops: &[StopRule], dt: f64) -> u64 {
    stops
        .iter()
        .filter_map(|r| match *r {
            StopRule::Horizon { t } => Some((t / dt).round() as u64),
            _ => None,
        })
        .min()
        .unwrap_or(u64::MAX)
}

/// Steps `w` under `drift` until a stop rule, killing, or `max_steps` more
/// steps.
pub fn drive(
    w: &mut Walker<'_>,
    drift: &dyn Fn(f64) -> f64,
    stops: &[StopRule],
    max_steps: u64,
) -> Result<StopReason> {
    let start = w.steps;
    if max_steps == 0 {
        return Ok(StopReason::Horizon);
    }
    loop {
        match w.advance(drift)? {
            Advance::Killed { .. } => return Ok(StopReason::Killed),
            Advance::Moved { x_prev, x } => {
                if let Some(r) = check_stops(stops, x_prev, x) {
                    return Ok(r);
                }
            }
        }
        if w.steps - start >= max_steps {
            return Ok(StopReason::Horizon);
        }
        if w.steps >= w.opts.max_steps {
            return Ok(StopReason::StepBudget);
        }
    }
}

/// First grid time at which the path meets `z` (sign change or within `tol`).
pub fn first_hitting_time(path: &Path, z: f64, tol: f64) -> f64 {
    let v = &path.values;
    for i in 0..v.len() {
        if (v[i] - z).abs() <= tol || (i > 0 && (v[i - 1] - z) * (v[i] - z) < 0.0) {
            return path.times[i];
        }
    }
    f64::INFINITY
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LastPassage {
    /// `-∞` when the level was never met.
    pub time: f64,
    /// The path stopped alive with its last crossing in the final tenth of
    /// its run, so the true last passage may lie beyond the horizon.
    pub warning: bool,
}

/// Last grid time at which the path meets `z`.
pub fn last_passage_time(path: &Path, z: f64, tol: f64) -> LastPassage {
    let v = &path.values;
    let mut found = f64::NEG_INFINITY;
    for i in (0..v.len()).rev() {
        if (v[i] - z).abs() <= tol || (i > 0 && (v[i - 1] - z) * (v[i] - z) < 0.0) {
            found = path.times[i];
            break;
        }
    }
    let end = path.end_time();
    let warning = !path.killed && found.is_finite() && found >= 0.9 * end;
    LastPassage {
        time: found,
        warning,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bm_drift, killed_bm, DiffusionSpec};

    #[test]
    fn step_examples() {
        assert_eq!(step(1.0, 0.0, 0.0, 0.01, 0.7).unwrap(), 1.0);
        assert_eq!(step(0.0, 2.0, 0.0, 0.5, -1.3).unwrap(), 1.0);
        assert!(step(0.0, f64::NAN, 1.0, 0.5, 0.0).is_err());
        assert!(step(0.0, 0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn deterministic_decay_is_killed_near_half() {
        let spec = DiffusionSpec::new("decay", 0.0, 1.0, |_| -1.0, |_| 0.0, 0.5);
        let dt = 1e-3;
        let p = simulate(
            &spec,
            &|x| spec.b(x),
            0.5,
            &[StopRule::BoundaryExit],
            SimOptions::new(dt),
            RandomSource::new(1, 0),
        )
        .unwrap();
        assert!(p.killed);
        assert_eq!(p.exit, Some(End::Left));
        assert!((p.lifetime - 0.5).abs() <= dt);
        assert_eq!(p.end_value(), 0.0);
    }

    #[test]
    fn hit_level_at_start_stops_immediately() {
        let spec = killed_bm(1.0).unwrap();
        let p = simulate(
            &spec,
            &|_| 0.0,
            0.3,
            &[StopRule::HitLevel { z: 0.3, tol: 1e-12 }],
            SimOptions::new(1e-3),
            RandomSource::new(1, 0),
        )
        .unwrap();
        assert_eq!(p.stop, StopReason::HitLevel);
        assert_eq!(p.end_time(), 0.0);
    }

    #[test]
    fn reproducible_paths() {
        let spec = killed_bm(1.0).unwrap();
        let run = || {
            simulate(
                &spec,
                &|_| 0.0,
                0.0,
                &[StopRule::Horizon { t: 0.2 }],
                SimOptions::new(1e-3),
                RandomSource::new(42, 9),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn horizon_grid_is_uniform() {
        let spec = bm_drift(0.0, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        let p = simulate(
            &spec,
            &|_| 0.0,
            0.0,
            &[StopRule::Horizon { t: 1.0 }],
            SimOptions::new(0.01).record(Record::Every(10)),
            RandomSource::new(3, 0),
        )
        .unwrap();
        assert_eq!(p.times.len(), 11);
        assert!((p.end_time() - 1.0).abs() < 1e-12);
        assert!(!p.killed);
        assert_eq!(p.lifetime, f64::INFINITY);
    }

    #[test]
    fn passage_times_on_handmade_path() {
        let p = Path {
            times: vec![0.0, 1.0, 2.0, 3.0],
            values: vec![0.0, 0.5, 1.5, 2.0],
            killed: true,
            lifetime: 3.0,
            exit: Some(End::Right),
            stop: StopReason::Killed,
            reflections: 0,
            seed: 0,
            index: 0,
        };
        assert_eq!(first_hitting_time(&p, 1.0, 1e-9), 2.0);
        assert_eq!(last_passage_time(&p, 1.0, 1e-9).time, 2.0);
        assert_eq!(first_hitting_time(&p, 5.0, 1e-9), f64::INFINITY);
        assert_eq!(last_passage_time(&p, 5.0, 1e-9).time, f64::NEG_INFINITY);
        assert_eq!(first_hitting_time(&p, 0.0, 1e-9), 0.0);
        assert_eq!(p.state_at(1.5), Some(1.0));
        assert_eq!(p.state_at(3.5), None);
    }

    #[test]
    fn barrier_reflects_and_counts() {
        let spec = bm_drift(0.0, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        let opts = SimOptions::new(1e-2).barrier(Barrier {
            level: 0.0,
            side: Side::High,
        });
        let mut w = Walker::new(&spec, 1e-3, 0.0, opts, RandomSource::new(0, 0)).unwrap();
        w.advance_with(&|_| 0.0, -1.0).unwrap();
        assert!(w.x > 0.0);
        assert_eq!(w.reflections, 1);
    }
}
