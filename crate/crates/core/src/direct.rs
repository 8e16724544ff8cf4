//! Direct simulation of the untransformed diffusion: terminal local time and
//! exit side, and horizon snapshots with a local-time tracker.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Advance, Record, SimOptions, Walker};
use crate::error::{Error, Result};
use crate::local_time::LocalTimeTracker;
use crate::model::DiffusionSpec;
use crate::rng::RandomSource;
use crate::scale::{hitting_prob, End, ScaleTable};

/// Return probability at which escape windows are placed on sides where the
/// process may escape.
pub const WINDOW_RETURN_PROB: f64 = 0.25;

/// Levels around `y` beyond which a path is resolved by a coin flip with the
/// exact probability of returning to the near edge of the band: on success
/// it restarts at that edge (strong Markov at its hitting time), otherwise
/// it escapes for good. The skipped stretch never enters the band, so the
/// band occupation and the exit side keep their exact law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeWindow {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl EscapeWindow {
    pub fn none() -> Self {
        EscapeWindow { lo: None, hi: None }
    }
}

/// Window with return probability [`WINDOW_RETURN_PROB`] on sides with a
/// finite scale endpoint and at distance `reach` on sides the process cannot
/// escape through (return probability 1). Never closer than `min_gap` to `y`.
pub fn default_window(
    scale: &ScaleTable,
    y: f64,
    reach: f64,
    min_gap: f64,
) -> Result<EscapeWindow> {
    let s_y = scale.s(y);
    let p = WINDOW_RETURN_PROB;
    let lo = if scale.s_left.is_finite() {
        Some(scale.inverse(scale.s_left + p * (s_y - scale.s_left))?)
    } else {
        Some(y - reach)
    };
    let hi = if scale.s_right.is_finite() {
        Some(scale.inverse(scale.s_right - p * (scale.s_right - s_y))?)
    } else {
        Some(y + reach)
    };
    let lo = lo.map(|v| v.min(y - min_gap)).filter(|&v| v > scale.left);
    let hi = hi.map(|v| v.max(y + min_gap)).filter(|&v| v < scale.right);
    Ok(EscapeWindow { lo, hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalSample {
    pub local_time: f64,
    /// Side through which the path left for good.
    pub exit: Option<End>,
    pub restarts: u32,
    pub steps: u64,
}

/// Simulates from `x0` until the path is killed or escapes, returning the
/// band estimate of the terminal local time at `y`.
#[allow(clippy::too_many_arguments)]
pub fn sample_terminal_local_time(
    spec: &DiffusionSpec,
    scale: &ScaleTable,
    x0: f64,
    y: f64,
    eps: f64,
    dt: f64,
    window: EscapeWindow,
    src: RandomSource,
    max_steps: u64,
) -> Result<TerminalSample> {
    let opts = SimOptions::new(dt).record(Record::Endpoints);
    let mut w = Walker::new(spec, x0, 0.0, opts, src)?;
    let mut aux = src.aux();
    let mut tracker = LocalTimeTracker::new(y, eps);
    let mut restarts = 0;
    let drift = |x: f64| spec.b(x);
    let lo = window.lo.unwrap_or(f64::NEG_INFINITY);
    let hi = window.hi.unwrap_or(f64::INFINITY);
    if lo >= y - eps || hi <= y + eps {
        return Err(Error::Config(format!(
            "escape window ({lo}, {hi}) must contain the band [{}, {}]",
            y - eps,
            y + eps
        )));
    }
    loop {
        let t_prev = w.t;
        match w.advance(&drift)? {
            Advance::Killed { x_prev, end } => {
                tracker.update(x_prev, spec.sigma(x_prev), w.t - t_prev);
                return Ok(TerminalSample {
                    local_time: tracker.value,
                    exit: Some(end),
                    restarts,
                    steps: w.steps,
                });
            }
            Advance::Moved { x_prev, x } => {
                tracker.update(x_prev, spec.sigma(x_prev), dt);
                if x <= lo || x >= hi {
                    let edge = if x <= lo { y - eps } else { y + eps };
                    let psi = hitting_prob(scale, x, edge)?;
                    let u: f64 = aux.random();
                    if u < psi {
                        restarts += 1;
                        w.set_state(edge);
                    } else {
                        return Ok(TerminalSample {
                            local_time: tracker.value,
                            exit: Some(if x <= lo { End::Left } else { End::Right }),
                            restarts,
                            steps: w.steps,
                        });
                    }
                }
            }
        }
        if w.steps >= max_steps {
            return Err(Error::Numeric {
                t: w.t,
                x: w.x,
                what: format!("step budget {max_steps} exhausted before escape"),
            });
        }
    }
}

/// State and tracked local time of a direct path at a horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// `None` when killed before the horizon.
    pub x: Option<f64>,
    pub local_time: f64,
    pub lifetime: f64,
}

/// Runs the plain diffusion to `horizon` (or killing), tracking local time.
#[allow(clippy::too_many_arguments)]
pub fn snapshot(
    spec: &DiffusionSpec,
    drift: &dyn Fn(f64) -> f64,
    x0: f64,
    y: f64,
    eps: f64,
    horizon: f64,
    opts: SimOptions,
    src: RandomSource,
) -> Result<Snapshot> {
    let mut w = Walker::new(spec, x0, 0.0, opts.record(Record::Endpoints), src)?;
    let mut tracker = LocalTimeTracker::new(y, eps);
    let n = (horizon / opts.dt).round() as u64;
    while w.steps < n {
        let t_prev = w.t;
        match w.advance(drift)? {
            Advance::Killed { x_prev, .. } => {
                tracker.update(x_prev, spec.sigma(x_prev), w.t - t_prev);
                return Ok(Snapshot {
                    x: None,
                    local_time: tracker.value,
                    lifetime: w.lifetime,
                });
            }
            Advance::Moved { x_prev, .. } => tracker.update(x_prev, spec.sigma(x_prev), opts.dt),
        }
    }
    Ok(Snapshot {
        x: Some(w.x),
        local_time: tracker.value,
        lifetime: f64::INFINITY,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{killed_bm, ou, sq_bessel};
    use crate::scale::build_scale;

    #[test]
    fn windows_sit_at_quarter_return_probability() {
        let spec = sq_bessel(4.0).unwrap();
        let sc = build_scale(&spec, 1e-10).unwrap();
        let w = default_window(&sc, 2.0, 1.0, 0.1).unwrap();
        assert!((w.hi.unwrap() - 8.0).abs() < 1e-9);
        assert_eq!(w.lo, Some(1.0));
        let spec = ou(1.0, 0.0).unwrap();
        let sc = build_scale(&spec, 1e-10).unwrap();
        let w = default_window(&sc, 0.0, 1.0, 0.1).unwrap();
        let lo = w.lo.unwrap();
        assert!((hitting_prob(&sc, lo, 0.0).unwrap() - 0.25).abs() < 1e-9);
    }

    #[test]
    fn killed_bm_always_exits_right() {
        let spec = killed_bm(1.0).unwrap();
        let sc = build_scale(&spec, 1e-10).unwrap();
        let w = default_window(&sc, 0.0, 1.0, 0.1).unwrap();
        assert!((hitting_prob(&sc, w.hi.unwrap(), 0.0).unwrap() - 0.25).abs() < 1e-9);
        for i in 0..20 {
            let s = sample_terminal_local_time(
                &spec,
                &sc,
                0.0,
                0.0,
                0.05,
                1e-3,
                w,
                RandomSource::new(9, i),
                10_000_000,
            )
            .unwrap();
            assert_eq!(s.exit, Some(End::Right));
            assert!(s.local_time >= 0.0);
        }
    }
}
