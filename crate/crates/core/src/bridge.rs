//! Local-time bridges, randomized bridges and the path-decomposition sampler.
//!
//! Phase 1 runs the recurrent transform from `y` until the band estimate of
//! local time at `y` reaches the target; phase 2 launches the Bessel-type
//! motion on the side chosen by θ from `y` at the end of the triggering step.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::direct::TerminalSample;
use crate::engine::{Advance, Record, SimOptions, StopReason, StopRule, Walker};
use crate::error::{Error, Result};
use crate::local_time::{default_bandwidth, LocalTimeTracker};
use crate::model::{DiffusionSpec, TransformKind};
use crate::rng::RandomSource;
use crate::scale::{rho, terminal_lt_rate, End, ScaleTable, Side};
use crate::stats::{ks_two_sample, TestEntry};
use crate::transforms::{launch_with_noise, EntranceLauncher, TransformedSpec};

/// Law of the local-time level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum Mixing {
    Point { a: f64 },
    Exponential { rate: f64 },
}

impl Mixing {
    /// Inverse-CDF draw from a uniform `v ∈ [0, 1)`.
    pub fn quantile(&self, v: f64) -> f64 {
        match *self {
            Mixing::Point { a } => a,
            Mixing::Exponential { rate } => -(1.0 - v).ln() / rate,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Mixing::Point { a } => a,
            Mixing::Exponential { rate } => 1.0 / rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Target {
    Fixed {
        a: f64,
    },
    /// `None` uses the exponential law with the terminal local-time rate.
    Randomized {
        law: Option<Mixing>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub y: f64,
    pub target: Target,
    /// Total time at which paths are stopped (phase 2 may be cut short);
    /// `INFINITY` runs phase 2 until killing.
    pub horizon: f64,
    pub dt: f64,
    /// Band half-width; `None` uses `5 σ(y) √dt`.
    pub eps: Option<f64>,
    pub launcher: EntranceLauncher,
    pub n: usize,
    /// Phase-1 time budget; `None` uses `20 · max(level, 1/λ(y))`.
    pub phase1_budget: Option<f64>,
    /// Budget doublings allowed before giving up on phase 1.
    pub retries: u32,
    /// Phase 2 always runs at least this long after the switch.
    pub min_post_switch: f64,
    /// Stop at `horizon` even inside phase 1 instead of requiring the switch.
    pub truncate: bool,
    pub record: Record,
}

impl BridgeConfig {
    pub fn new(y: f64, target: Target, dt: f64) -> Self {
        BridgeConfig {
            y,
            target,
            horizon: f64::INFINITY,
            dt,
            eps: None,
            launcher: EntranceLauncher::offset(),
            n: 1,
            phase1_budget: None,
            retries: 3,
            min_post_switch: 1.0,
            truncate: false,
            record: Record::Full,
        }
    }

    pub fn horizon(mut self, t: f64) -> Self {
        self.horizon = t;
        self
    }

    pub fn launcher(mut self, l: EntranceLauncher) -> Self {
        self.launcher = l;
        self
    }

    pub fn truncate(mut self, on: bool) -> Self {
        self.truncate = on;
        self
    }

    pub fn record(mut self, r: Record) -> Self {
        self.record = r;
        self
    }

    pub fn eps_for(&self, spec: &DiffusionSpec) -> f64 {
        self.eps
            .unwrap_or_else(|| default_bandwidth(spec.sigma(self.y), self.dt))
    }

    pub fn validate(&self, spec: &DiffusionSpec, scale: &ScaleTable) -> Result<()> {
        scale.check(self.y)?;
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if let Target::Fixed { a } = self.target {
            if !(a >= 0.0) {
                return Err(Error::Config(format!(
                    "local-time level must be >= 0, got {a}"
                )));
            }
        }
        if let Some(e) = self.eps {
            if !(e > 0.0) {
                return Err(Error::Config(format!("eps must be positive, got {e}")));
            }
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        let _ = spec;
        Ok(())
    }
}

/// One conditioned path and its bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeOutcome {
    pub path: crate::engine::Path,
    pub theta: u8,
    /// Local-time level the path was conditioned on.
    pub level: f64,
    /// Interpolated inverse local time; `INFINITY` if phase 1 was truncated.
    pub switch_time: f64,
    /// Grid time at which phase 2 starts.
    pub switch_grid_time: f64,
    pub lt_at_switch: f64,
    /// Band estimate at the end of the path, phase 2 included.
    pub lt_terminal: f64,
    pub exit_side: Option<End>,
    /// Steps reflected at `y` during phase 2.
    pub reflections: u32,
    /// Phase 2 left the `ε` band and later came within `ε/2` of `y`.
    pub band_return: bool,
}

impl BridgeOutcome {
    pub fn completed(&self) -> bool {
        self.switch_time.is_finite()
    }

    pub fn summary(&self) -> OutcomeSummary {
        OutcomeSummary {
            seed: self.path.seed,
            index: self.path.index,
            theta: self.theta,
            level: self.level,
            tau: finite_or_none(self.switch_time),
            lt_at_switch: self.lt_at_switch,
            lt_terminal: self.lt_terminal,
            exit_side: self.exit_side,
            lifetime: finite_or_none(self.path.lifetime),
        }
    }
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// One JSON line per outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub seed: u64,
    pub index: u64,
    pub theta: u8,
    pub level: f64,
    pub tau: Option<f64>,
    pub lt_at_switch: f64,
    pub lt_terminal: f64,
    pub exit_side: Option<End>,
    pub lifetime: Option<f64>,
}

pub fn write_json_lines<W: Write>(out: &mut W, outcomes: &[BridgeOutcome]) -> Result<()> {
    for o in outcomes {
        serde_json::to_writer(&mut *out, &o.summary())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn draw_theta(p: f64, aux: &mut impl Rng) -> u8 {
    if p >= 1.0 {
        1
    } else if p <= 0.0 {
        0
    } else {
        u8::from(aux.random::<f64>() < p)
    }
}

/// Local-time bridge to the fixed level of `cfg`.
pub fn sample_bridge(
    spec: &DiffusionSpec,
    scale: &ScaleTable,
    cfg: &BridgeConfig,
    src: RandomSource,
) -> Result<BridgeOutcome> {
    let a = match cfg.target {
        Target::Fixed { a } => a,
        Target::Randomized { .. } => {
            return Err(Error::Config("sample_bridge needs a fixed target".into()))
        }
    };
    cfg.validate(spec, scale)?;
    let mut aux = src.aux();
    let theta = draw_theta(rho(scale, cfg.y)?, &mut aux);
    run_bridge(spec, scale, cfg, a, theta, src)
}

/// Default mixing law: exponential with the terminal local-time rate at `y`.
pub fn default_mixing(scale: &ScaleTable, y: f64) -> Result<Mixing> {
    Ok(Mixing::Exponential {
        rate: terminal_lt_rate(scale, y)?,
    })
}

/// Bridge to a level drawn from the mixing law, independent of θ and the
/// driving noise.
pub fn sample_randomized_bridge(
    spec: &DiffusionSpec,
    scale: &ScaleTable,
    cfg: &BridgeConfig,
    src: RandomSource,
) -> Result<BridgeOutcome> {
    let law = match cfg.target {
        Target::Randomized { law } => match law {
            Some(l) => l,
            None => default_mixing(scale, cfg.y)?,
        },
        Target::Fixed { .. } => {
            return Err(Error::Config(
                "sample_randomized_bridge needs a randomized target".into(),
            ))
        }
    };
    cfg.validate(spec, scale)?;
    let (theta, level) = draw_side_and_level(scale, cfg.y, law, src)?;
    run_bridge(spec, scale, cfg, level, theta, src)
}

/// θ and the local-time level exactly as [`sample_randomized_bridge`] draws
/// them for the path with stream `src`.
pub fn draw_side_and_level(
    scale: &ScaleTable,
    y: f64,
    law: Mixing,
    src: RandomSource,
) -> Result<(u8, f64)> {
    let mut aux = src.aux();
    let theta = draw_theta(rho(scale, y)?, &mut aux);
    Ok((theta, law.quantile(aux.random())))
}

/// Path decomposition: recurrent transform up to an independent exponential
/// local-time level, then the Bessel-type motion on the side drawn by θ.
pub fn sample_decomposition(
    spec: &DiffusionSpec,
    scale: &ScaleTable,
    y: f64,
    horizon: f64,
    dt: f64,
    src: RandomSource,
) -> Result<BridgeOutcome> {
    let cfg = BridgeConfig::new(y, Target::Randomized { law: None }, dt).horizon(horizon);
    sample_randomized_bridge(spec, scale, &cfg, src)
}

/// Same as [`sample_decomposition`] with full control over the configuration.
pub fn sample_decomposition_with(
    spec: &DiffusionSpec,
    scale: &ScaleTable,
    cfg: &BridgeConfig,
    src: RandomSource,
) -> Result<BridgeOutcome> {
    let cfg = BridgeConfig {
        target: Target::Randomized { law: None },
        ..*cfg
    };
    sample_randomized_bridge(spec, scale, &cfg, src)
}

fn run_bridge(
    spec: &DiffusionSpec,
    scale: &ScaleTable,
    cfg: &BridgeConfig,
    level: f64,
    theta: u8,
    src: RandomSource,
) -> Result<BridgeOutcome> {
    let y = cfg.y;
    let eps = cfg.eps_for(spec);
    let rate = terminal_lt_rate(scale, y)?;
    let recurrent =
        TransformedSpec::new(spec.clone(), scale.clone(), TransformKind::Recurrent { y })?;
    let opts = SimOptions::new(cfg.dt)
        .record(cfg.record)
        .reflect_ends(true);
    let mut w = Walker::new(spec, y, 0.0, opts, src)?;
    let mut tracker = LocalTimeTracker::new(y, eps).with_target(level);
    let mut budget = cfg.phase1_budget.unwrap_or(20.0 * level.max(1.0 / rate));
    let mut retries = 0;
    let horizon_steps = if cfg.horizon.is_finite() {
        (cfg.horizon / cfg.dt).round() as u64
    } else {
        u64::MAX
    };
    let drift1 = |x: f64| recurrent.drift(x);
    // Phase 1.
    let mut truncated = false;
    while tracker.reached().is_none() {
        if cfg.truncate && w.steps >= horizon_steps {
            truncated = true;
            break;
        }
        if w.t >= budget {
            if retries >= cfg.retries {
                return Err(Error::IncompleteBridge {
                    reached: tracker.value,
                    target: level,
                    horizon: budget,
                });
            }
            retries += 1;
            budget *= 2.0;
        }
        let t_prev = w.t;
        match w.advance(&drift1)? {
            Advance::Moved { x_prev, .. } => tracker.update(x_prev, spec.sigma(x_prev), cfg.dt),
            Advance::Killed { x_prev, .. } => {
                // The transformed process cannot reach the boundary in
                // continuous time; a grid crossing is a discretization artifact.
                tracker.update(x_prev, spec.sigma(x_prev), w.t - t_prev);
                return Err(Error::Numeric {
                    t: w.t,
                    x: x_prev,
                    what: "recurrent transform killed at a boundary".into(),
                });
            }
        }
    }
    let lt_at_switch = tracker.value;
    if truncated {
        let (path, _) = w.finish(StopReason::Horizon);
        return Ok(BridgeOutcome {
            path,
            theta,
            level,
            switch_time: f64::INFINITY,
            switch_grid_time: f64::INFINITY,
            lt_at_switch,
            lt_terminal: lt_at_switch,
            exit_side: None,
            reflections: 0,
            band_return: false,
        });
    }
    let switch_time = tracker.reached().unwrap_or(0.0);
    let switch_grid_time = w.t;
    let phase1_steps = w.steps;
    w.mark();
    w.set_state(y);
    let (mut path, noise) = w.finish(StopReason::LocalTimeReached);
    // Phase 2.
    let side = if theta == 1 { Side::High } else { Side::Low };
    let kind = match side {
        Side::High => TransformKind::BesselHigh { y },
        Side::Low => TransformKind::BesselLow { y },
    };
    let bessel = TransformedSpec::new(spec.clone(), scale.clone(), kind)?;
    let remaining = if !cfg.horizon.is_finite() {
        f64::INFINITY
    } else {
        let total = horizon_steps.saturating_sub(phase1_steps) as f64 * cfg.dt;
        if cfg.truncate {
            total
        } else {
            total.max(cfg.min_post_switch)
        }
    };
    let stops: Vec<StopRule> = if remaining.is_finite() {
        vec![StopRule::Horizon { t: remaining }, StopRule::BoundaryExit]
    } else {
        vec![StopRule::BoundaryExit]
    };
    let (mut tail, _) = launch_with_noise(
        &bessel,
        cfg.launcher,
        &stops,
        SimOptions::new(cfg.dt).record(Record::Full),
        src,
        noise,
    )?;
    // Keep tracking local time over phase 2 to measure band leakage.
    let mut post = tracker.clone();
    let mut band_return = false;
    let mut left_band = false;
    for i in 0..tail.values.len().saturating_sub(1) {
        let x = tail.values[i];
        post.update(x, spec.sigma(x), tail.times[i + 1] - tail.times[i]);
        let d = (x - y).abs();
        if d > eps {
            left_band = true;
        } else if left_band && d <= 0.5 * eps {
            band_return = true;
        }
    }
    for t in tail.times.iter_mut() {
        *t += switch_grid_time;
    }
    if tail.lifetime.is_finite() {
        tail.lifetime += switch_grid_time;
    }
    thin_tail(&mut tail, cfg.record, phase1_steps);
    path.append(&tail);
    let exit_side = path
        .exit
        .or_else(|| escape_side(scale, side, path.end_value()));
    Ok(BridgeOutcome {
        theta,
        level,
        switch_time,
        switch_grid_time,
        lt_at_switch,
        lt_terminal: post.value,
        exit_side,
        reflections: tail.reflections,
        band_return,
        path,
    })
}

/// Thins a phase-2 path that starts `offset` steps into the run, keeping the
/// points a single walker would have recorded.
/// Samples with at least this many exits on each side are needed for the
/// independence test to be conclusive.
pub const MIN_EXITS_PER_SIDE: usize = 50;

/// Two-sample KS between terminal local times of paths exiting right and
/// left. Expected to accept when the paths start at the level and to reject
/// otherwise; `expect_independent` sets which outcome passes.
pub fn lt_independence_check(
    name: &str,
    samples: &[TerminalSample],
    expect_independent: bool,
    alpha: f64,
) -> Result<TestEntry> {
    let side = |end: End| -> Vec<f64> {
        samples
            .iter()
            .filter(|s| s.exit == Some(end))
            .map(|s| s.local_time)
            .collect()
    };
    let (right, left) = (side(End::Right), side(End::Left));
    let oracle = if expect_independent {
        "independent of exit side"
    } else {
        "dependent on exit side"
    };
    if right.len().min(left.len()) < MIN_EXITS_PER_SIDE {
        let mut e = TestEntry::new(name, oracle, alpha);
        e.n = right.len();
        e.n2 = Some(left.len());
        e.inconclusive = true;
        e.notes.push("too few exits on one side".into());
        return Ok(e);
    }
    let ks = ks_two_sample(&right, &left)?;
    let mut e = TestEntry::from_ks(name, oracle, ks, right.len(), Some(left.len()), alpha);
    if !expect_independent {
        e.passed = ks.p_value < alpha;
    }
    Ok(e)
}

fn thin_tail(path: &mut crate::engine::Path, record: Record, offset: u64) {
    let n = path.times.len();
    let keep: Vec<usize> = (0..n)
        .filter(|&i| match record {
            Record::Full => true,
            Record::Every(k) => (offset + i as u64).is_multiple_of(k as u64) || i + 1 == n,
            Record::Endpoints => i + 1 == n,
        })
        .collect();
    path.times = keep.iter().map(|&i| path.times[i]).collect();
    path.values = keep.iter().map(|&i| path.values[i]).collect();
}

/// Side of escape once the scale value is within `1e-3` of a finite scale
/// endpoint on the side of the path.
fn escape_side(scale: &ScaleTable, side: Side, x: f64) -> Option<End> {
    const ETA: f64 = 1e-3;
    if !scale.contains(x) {
        return None;
    }
    let s = scale.s(x);
    match side {
        Side::High if scale.s_right.is_finite() && scale.s_right - s <= ETA => Some(End::Right),
        Side::Low if scale.s_left.is_finite() && s - scale.s_left <= ETA => Some(End::Left),
        _ => None,
    }
}
