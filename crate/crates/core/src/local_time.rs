//! Band estimator of semimartingale local time at a level and inverse local
//! time queries.

use serde::{Deserialize, Serialize};

use crate::scale::ScaleTable;

/// Default bandwidth `5 σ(y) √dt`.
pub fn default_bandwidth(sigma_at_level: f64, dt: f64) -> f64 {
    5.0 * sigma_at_level * dt.sqrt()
}

/// Running estimate `L̂ = (1/2ε) Σ 1{|x_prev - y| ≤ ε} σ²(x_prev) dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTimeTracker {
    pub level: f64,
    pub eps: f64,
    pub value: f64,
    pub time: f64,
    /// `(t, L̂)` at each band entry and exit.
    pub history: Vec<(f64, f64)>,
    in_band: bool,
    /// Target whose first passage is timed at step resolution.
    target: Option<f64>,
    reached_at: Option<f64>,
}

impl LocalTimeTracker {
    pub fn new(level: f64, eps: f64) -> Self {
        LocalTimeTracker {
            level,
            eps,
            value: 0.0,
            time: 0.0,
            history: Vec::new(),
            in_band: false,
            target: None,
            reached_at: None,
        }
    }

    /// Also records the interpolated time at which `L̂` first reaches `a`.
    pub fn with_target(mut self, a: f64) -> Self {
        self.target = Some(a);
        if a <= 0.0 {
            self.reached_at = Some(0.0);
        }
        self
    }

    /// Continues from an already accumulated value at time `t`.
    pub fn resume(mut self, t: f64, value: f64) -> Self {
        self.time = t;
        self.value = value;
        self
    }

    pub fn in_band(&self, x: f64) -> bool {
        (x - self.level).abs() <= self.eps
    }

    /// Accounts for one step of length `dt` that started at `x_prev`.
    pub fn update(&mut self, x_prev: f64, sigma_val: f64, dt: f64) {
        let inside = self.in_band(x_prev);
        if inside != self.in_band {
            self.history.push((self.time, self.value));
            self.in_band = inside;
        }
        if inside {
            let before = self.value;
            self.value += sigma_val * sigma_val * dt / (2.0 * self.eps);
            if let (Some(a), None) = (self.target, self.reached_at) {
                if self.value >= a {
                    let frac = (a - before) / (self.value - before);
                    self.reached_at = Some(self.time + frac.clamp(0.0, 1.0) * dt);
                }
            }
        }
        self.time += dt;
    }

    /// Closes the history at the current time.
    pub fn finish(&mut self) {
        if self.history.last().map(|h| h.0) != Some(self.time) {
            self.history.push((self.time, self.value));
        }
    }

    pub fn reached(&self) -> Option<f64> {
        self.reached_at
    }

    pub fn target(&self) -> Option<f64> {
        self.target
    }
}

/// Expected shortfall of the band estimate for a path started at `x0`: the
/// band average of `E L^a` loses `(ε - d)² / 2ε` to the kink of `-|x0 - a|`,
/// with `d = |x0 - y|`. Zero once the start is outside the band.
pub fn start_bias(x0: f64, y: f64, eps: f64) -> f64 {
    let d = (x0 - y).abs();
    if d >= eps {
        0.0
    } else {
        (eps - d).powi(2) / (2.0 * eps)
    }
}

/// Diffusion local time `s'(y) L / 2` from semimartingale local time `L`.
pub fn diffusion_local_time(scale: &ScaleTable, y: f64, semimart: f64) -> f64 {
    0.5 * scale.ds(y) * semimart
}

/// First time `L̂` reaches `a`, interpolated linearly between history points
/// (exact inside a band stretch when σ is constant across the band).
pub fn inverse_local_time(history: &[(f64, f64)], a: f64) -> f64 {
    if a <= 0.0 {
        return 0.0;
    }
    let mut prev = (0.0, 0.0);
    for &(t, l) in history {
        if l >= a {
            if l == prev.1 {
                return t;
            }
            return prev.0 + (t - prev.0) * (a - prev.1) / (l - prev.1);
        }
        prev = (t, l);
    }
    f64::INFINITY
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn start_bias_profile() {
        assert!((start_bias(0.0, 0.0, 0.1) - 0.05).abs() < 1e-15);
        assert_eq!(start_bias(0.3, 0.0, 0.1), 0.0);
        assert!((start_bias(0.05, 0.0, 0.1) - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn diffusion_local_time_conversion() {
        let kbm = crate::model::killed_bm(2.0).unwrap();
        let sc = crate::scale::build_scale(&kbm, 1e-10).unwrap();
        assert_eq!(diffusion_local_time(&sc, 0.3, 0.0), 0.0);
        assert!((diffusion_local_time(&sc, -1.0, 3.0) - 0.75).abs() < 1e-15);
        let bm = crate::model::bm_drift(0.0, 0.0, 1.0).unwrap();
        let sc = crate::scale::build_scale(&bm, 1e-10).unwrap();
        // Unit-slope scale on (0, 1).
        assert!((diffusion_local_time(&sc, 0.5, 3.0) - 1.5).abs() < 1e-8);
    }

    #[test]
    fn outside_band_stays_zero() {
        let mut tr = LocalTimeTracker::new(0.0, 0.1);
        for _ in 0..100 {
            tr.update(0.5, 1.0, 0.01);
        }
        assert_eq!(tr.value, 0.0);
    }

    #[test]
    fn at_level_start_counts() {
        let mut tr = LocalTimeTracker::new(0.0, 0.1);
        tr.update(0.0, 1.0, 0.01);
        assert!((tr.value - 0.05).abs() < 1e-15);
    }

    #[test]
    fn sigma_doubling_quadruples() {
        let xs = [0.0, 0.05, 0.2, -0.03, 0.09, 0.5];
        let mut a = LocalTimeTracker::new(0.0, 0.1);
        let mut b = LocalTimeTracker::new(0.0, 0.1);
        for &x in &xs {
            a.update(x, 1.0, 0.01);
            b.update(x, 2.0, 0.01);
        }
        assert!((b.value - 4.0 * a.value).abs() < 1e-14);
    }

    #[test]
    fn inverse_from_history() {
        let mut tr = LocalTimeTracker::new(0.0, 0.5).with_target(0.15);
        // 3 steps inside (each +1), 2 outside, 2 inside.
        for &x in &[0.0, 0.1, 0.2, 1.0, 1.0, 0.3, 0.0] {
            tr.update(x, 1.0, 1.0);
        }
        tr.finish();
        assert!((tr.value - 5.0).abs() < 1e-12);
        assert_eq!(inverse_local_time(&tr.history, 0.0), 0.0);
        assert!((inverse_local_time(&tr.history, 1.5) - 1.5).abs() < 1e-12);
        assert!((inverse_local_time(&tr.history, 4.0) - 6.0).abs() < 1e-12);
        assert_eq!(inverse_local_time(&tr.history, 5.5), f64::INFINITY);
        assert!((tr.reached().unwrap() - 0.15).abs() < 1e-12);
    }
}
