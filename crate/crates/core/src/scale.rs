//! Scale function, speed density, boundary classification, potential density,
//! hitting probabilities and the laws of terminal local time.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{window, ClosedScale, Coef, DiffusionSpec};
use crate::quadrature::{
    integrate_graded, integrate_to_endpoint, integrate_to_endpoint_rel, Improper, QuadError,
};

/// Default absolute tolerance for scale quadrature.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Nodes of the Hermite table used when no closed form is available.
const TABLE_NODES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Low,
    High,
}

impl Side {
    pub fn of(x: f64, y: f64) -> Side {
        if x <= y {
            Side::Low
        } else {
            Side::High
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Side::Low => -1.0,
            Side::High => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Regular,
    Exit,
    Entrance,
    Natural,
}

impl fmt::Display for BoundaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BoundaryKind::Regular => "regular",
            BoundaryKind::Exit => "exit",
            BoundaryKind::Entrance => "entrance",
            BoundaryKind::Natural => "natural",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleSource {
    ClosedForm,
    Quadrature,
    Tabulated,
}

/// Normalized scale function: `s(l+) = 0` and `s(r-) = 1` whenever finite.
#[derive(Clone)]
pub struct ScaleTable {
    s: Coef,
    ds: Coef,
    inverse: Option<Coef>,
    pub s_left: f64,
    pub s_right: f64,
    pub left: f64,
    pub right: f64,
    pub anchor: f64,
    /// Affine map from the raw quadrature scale: `s = factor * raw + offset`.
    pub factor: f64,
    pub offset: f64,
    pub source: ScaleSource,
}

impl fmt::Debug for ScaleTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScaleTable")
            .field("left", &self.left)
            .field("right", &self.right)
            .field("s_left", &self.s_left)
            .field("s_right", &self.s_right)
            .field("factor", &self.factor)
            .field("offset", &self.offset)
            .field("source", &self.source)
            .finish()
    }
}

impl ScaleTable {
    #[inline]
    pub fn s(&self, x: f64) -> f64 {
        (self.s)(x)
    }

    #[inline]
    pub fn ds(&self, x: f64) -> f64 {
        (self.ds)(x)
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.left && x < self.right
    }

    pub fn check(&self, x: f64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::Domain {
                x,
                left: self.left,
                right: self.right,
            })
        }
    }

    pub fn both_finite(&self) -> bool {
        self.s_left.is_finite() && self.s_right.is_finite()
    }

    pub fn has_inverse(&self) -> bool {
        self.inverse.is_some()
    }

    /// Solves `s(x) = v` on the state interval.
    pub fn inverse(&self, v: f64) -> Result<f64> {
        if !(v > self.s_left && v < self.s_right) {
            return Err(Error::Inversion {
                target: v,
                lo: self.s_left,
                hi: self.s_right,
            });
        }
        if let Some(inv) = &self.inverse {
            let x = inv(v);
            if x.is_finite() {
                return Ok(x.clamp(self.left, self.right));
            }
        }
        self.invert_by_bisection(v)
    }

    fn invert_by_bisection(&self, v: f64) -> Result<f64> {
        let mut lo = self.anchor;
        let mut hi = self.anchor;
        let mut step = 1.0;
        let fail = |lo, hi| Error::Inversion { target: v, lo, hi };
        while self.s(lo) > v {
            hi = lo;
            lo = if self.left.is_finite() {
                self.left + 0.5 * (lo - self.left)
            } else {
                lo - step
            };
            step *= 2.0;
            if !lo.is_finite() || lo == hi {
                return Err(fail(lo, hi));
            }
        }
        step = 1.0;
        while self.s(hi) < v {
            lo = lo.max(hi);
            hi = if self.right.is_finite() {
                self.right - 0.5 * (self.right - hi)
            } else {
                hi + step
            };
            step *= 2.0;
            if !hi.is_finite() || hi == lo {
                return Err(fail(lo, hi));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.s(mid) < v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Raw scale pieces from quadrature, anchored at `c` with `raw(c) = 0` and
/// `raw'(c) = 1`.
#[derive(Clone)]
struct RawScale {
    drift: Coef,
    sigma: Coef,
    left: f64,
    right: f64,
    anchor: f64,
    tol: f64,
}

impl RawScale {
    fn gap(&self, x: f64) -> f64 {
        if x >= self.anchor {
            self.right - x
        } else {
            x - self.left
        }
    }

    fn log_ds(&self, x: f64) -> std::result::Result<f64, QuadError> {
        let g = |z: f64| {
            let sig = (self.sigma)(z);
            (self.drift)(z) / (sig * sig)
        };
        Ok(-2.0 * integrate_graded(g, self.anchor, x, self.gap(x), self.tol)?)
    }

    fn ds(&self, x: f64) -> std::result::Result<f64, QuadError> {
        self.log_ds(x).map(f64::exp)
    }

    fn s(&self, x: f64) -> std::result::Result<f64, QuadError> {
        let f = |z: f64| self.ds(z).unwrap_or(f64::NAN);
        integrate_graded(f, self.anchor, x, self.gap(x), self.tol)
    }

    /// `(raw s, raw s')` on a grid, accumulated cell by cell outward from the
    /// anchor so each quadrature spans one cell only.
    fn on_grid(&self, xs: &[f64]) -> std::result::Result<Vec<(f64, f64)>, QuadError> {
        let g = |z: f64| {
            let sig = (self.sigma)(z);
            (self.drift)(z) / (sig * sig)
        };
        let mut out = vec![(f64::NAN, f64::NAN); xs.len()];
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
        let split = order.partition_point(|&i| xs[i] < self.anchor);
        let (below, above) = order.split_at(split);
        for chain in [above.to_vec(), below.iter().rev().copied().collect()] {
            let (mut x0, mut log_ds, mut s) = (self.anchor, 0.0, 0.0);
            for i in chain {
                let x1 = xs[i];
                let gap = self.gap(x1);
                let base = log_ds;
                let cell_ds = |z: f64| match integrate_graded(g, x0, z, self.gap(z), self.tol) {
                    Ok(v) => (base - 2.0 * v).exp(),
                    Err(_) => f64::NAN,
                };
                s += integrate_graded(cell_ds, x0, x1, gap, self.tol)?;
                log_ds -= 2.0 * integrate_graded(g, x0, x1, gap, self.tol)?;
                out[i] = (s, log_ds.exp());
                x0 = x1;
            }
        }
        Ok(out)
    }

    fn end(&self, endpoint: f64) -> std::result::Result<Improper, QuadError> {
        let f = |z: f64| self.ds(z).unwrap_or(f64::NAN);
        integrate_to_endpoint(f, self.anchor, endpoint, self.tol)
    }
}

/// Scale built purely by quadrature, normalized but without consulting any
/// closed form. Every evaluation runs nested quadrature.
pub fn build_numeric_scale(spec: &DiffusionSpec, tol: f64) -> Result<ScaleTable> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    spec.validate(&spec.probe_grid(64))?;
    let raw = RawScale {
        drift: spec.drift.clone(),
        sigma: spec.sigma.clone(),
        left: spec.left,
        right: spec.right,
        anchor: spec.anchor,
        tol,
    };
    let end = |e: f64| -> Result<Option<f64>> {
        match raw.end(e) {
            Ok(Improper::Converged(v)) => Ok(Some(v)),
            Ok(Improper::Diverged { .. }) => Ok(None),
            Err(err) => Err(Error::IndeterminateBoundary(format!(
                "scale integral toward {e} failed: {err:?}"
            ))),
        }
    };
    let raw_l = end(spec.left)?;
    let raw_r = end(spec.right)?;
    let (factor, offset, s_left, s_right) = match (raw_l, raw_r) {
        (Some(a), Some(b)) => {
            let f = 1.0 / (b - a);
            (f, -a * f, 0.0, 1.0)
        }
        (Some(a), None) => (1.0, -a, 0.0, f64::INFINITY),
        (None, Some(b)) => (1.0, 1.0 - b, f64::NEG_INFINITY, 1.0),
        (None, None) => return Err(Error::NotTransient),
    };
    let r1 = raw.clone();
    let r2 = raw;
    Ok(ScaleTable {
        s: Arc::new(move |x| factor * r1.s(x).unwrap_or(f64::NAN) + offset),
        ds: Arc::new(move |x| factor * r2.ds(x).unwrap_or(f64::NAN)),
        inverse: None,
        s_left,
        s_right,
        left: spec.left,
        right: spec.right,
        anchor: spec.anchor,
        factor,
        offset,
        source: ScaleSource::Quadrature,
    })
}

/// Normalized `(s, s')` on a grid without per-point nested quadrature.
pub fn numeric_on_grid(
    spec: &DiffusionSpec,
    numeric: &ScaleTable,
    tol: f64,
    xs: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let raw = RawScale {
        drift: spec.drift.clone(),
        sigma: spec.sigma.clone(),
        left: spec.left,
        right: spec.right,
        anchor: spec.anchor,
        tol,
    };
    let vals = raw
        .on_grid(xs)
        .map_err(|e| Error::InvalidSpec(format!("scale quadrature failed: {e:?}")))?;
    Ok(vals
        .into_iter()
        .map(|(s, ds)| (numeric.factor * s + numeric.offset, numeric.factor * ds))
        .collect())
}

/// Quadrature scale mapped onto the closed form's normalization, which may
/// differ by a positive factor when only one endpoint is finite. Returns the
/// factor, the shift and `(x, closed, quadrature)` on `grid`.
#[allow(clippy::type_complexity)]
fn closed_vs_quadrature(
    spec: &DiffusionSpec,
    closed: &ClosedScale,
    numeric: &ScaleTable,
    tol: f64,
    grid: &[f64],
) -> Result<(f64, f64, Vec<(f64, f64, f64)>)> {
    let c = spec.anchor;
    let k = (closed.ds)(c) / numeric.factor;
    let shift = (closed.s)(c) - k * numeric.offset;
    let vals = numeric_on_grid(spec, numeric, tol, grid)?;
    let pairs = grid
        .iter()
        .zip(&vals)
        .map(|(&x, &(num_s, _))| (x, (closed.s)(x), k * num_s + shift))
        .collect();
    Ok((k, shift, pairs))
}

/// Largest absolute difference between the closed-form scale and quadrature
/// on an `n`-point probe grid.
pub fn closed_form_error(spec: &DiffusionSpec, tol: f64, n: usize) -> Result<f64> {
    let closed = spec
        .closed_form_scale
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} has no closed-form scale", spec.name)))?;
    let numeric = build_numeric_scale(spec, tol)?;
    let (_, _, pairs) = closed_vs_quadrature(spec, closed, &numeric, tol, &spec.probe_grid(n))?;
    Ok(pairs
        .iter()
        .map(|(_, a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Builds the normalized scale. A closed form, when supplied, is checked
/// against quadrature on a probe grid (tolerance `100 * tol`, relative to
/// `1 + |s|`) and then used. Otherwise quadrature values are tabulated on a
/// window around the anchor for fast evaluation.
pub fn build_scale(spec: &DiffusionSpec, tol: f64) -> Result<ScaleTable> {
    let numeric = build_numeric_scale(spec, tol)?;
    match &spec.closed_form_scale {
        Some(closed) => {
            if closed.s_left.is_finite() != numeric.s_left.is_finite()
                || closed.s_right.is_finite() != numeric.s_right.is_finite()
            {
                return Err(Error::InvalidSpec(format!(
                    "closed-form scale endpoints ({}, {}) disagree with quadrature ({}, {})",
                    closed.s_left, closed.s_right, numeric.s_left, numeric.s_right
                )));
            }
            let (k, shift, pairs) =
                closed_vs_quadrature(spec, closed, &numeric, tol, &spec.probe_grid(200))?;
            for (x, want, got) in pairs {
                if !((got - want).abs() <= 100.0 * tol * (1.0 + want.abs())) {
                    return Err(Error::InvalidSpec(format!(
                        "closed-form scale disagrees with quadrature at x={x}: {want} vs {got}"
                    )));
                }
            }
            Ok(ScaleTable {
                s: closed.s.clone(),
                ds: closed.ds.clone(),
                inverse: closed.inverse.clone(),
                s_left: closed.s_left,
                s_right: closed.s_right,
                left: spec.left,
                right: spec.right,
                anchor: spec.anchor,
                factor: k * numeric.factor,
                offset: k * numeric.offset + shift,
                source: ScaleSource::ClosedForm,
            })
        }
        None => tabulate(spec, numeric, tol),
    }
}

/// Cubic Hermite table of `s` (slopes `s'`) and of `ln s'` (slopes
/// `-2b/σ²`) on a window; quadrature outside it.
fn tabulate(spec: &DiffusionSpec, numeric: ScaleTable, tol: f64) -> Result<ScaleTable> {
    let (lo, hi) = window(spec.left, spec.right, spec.anchor);
    let n = TABLE_NODES;
    let h = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
    let vals = numeric_on_grid(spec, &numeric, tol, &xs)?;
    let (s, ds): (Vec<f64>, Vec<f64>) = vals.into_iter().unzip();
    let b = spec.drift.clone();
    let sig = spec.sigma.clone();
    let dlog = move |x: f64| -2.0 * b(x) / sig(x).powi(2);
    if ds.iter().chain(s.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidSpec(
            "scale table has non-finite entries".into(),
        ));
    }
    let logds: Vec<f64> = ds.iter().map(|v| v.ln()).collect();
    let slog: Vec<f64> = xs.iter().map(|&x| dlog(x)).collect();
    let table = Arc::new(HermiteTable {
        lo,
        h,
        xs,
        s,
        ds,
        logds,
        slog,
    });
    for x in spec.probe_grid(37) {
        let want = numeric.s(x);
        let got = table.s(x).unwrap_or(want);
        if (got - want).abs() > 1e3 * tol * (1.0 + want.abs()) {
            return Err(Error::InvalidSpec(format!(
                "scale table inaccurate at x={x}: {got} vs {want}"
            )));
        }
    }
    let (t1, t2) = (table.clone(), table);
    let (n1, n2) = (numeric.clone(), numeric.clone());
    Ok(ScaleTable {
        s: Arc::new(move |x| t1.s(x).unwrap_or_else(|| n1.s(x))),
        ds: Arc::new(move |x| t2.ds(x).unwrap_or_else(|| n2.ds(x))),
        inverse: None,
        source: ScaleSource::Tabulated,
        ..numeric
    })
}

struct HermiteTable {
    lo: f64,
    h: f64,
    xs: Vec<f64>,
    s: Vec<f64>,
    ds: Vec<f64>,
    logds: Vec<f64>,
    slog: Vec<f64>,
}

impl HermiteTable {
    fn cell(&self, x: f64) -> Option<(usize, f64)> {
        let u = (x - self.lo) / self.h;
        if !(u >= 0.0) || u > (self.xs.len() - 1) as f64 {
            return None;
        }
        let i = (u.floor() as usize).min(self.xs.len() - 2);
        Some((i, u - i as f64))
    }

    fn hermite(&self, i: usize, t: f64, y: &[f64], m: &[f64]) -> f64 {
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * y[i] + h10 * self.h * m[i] + h01 * y[i + 1] + h11 * self.h * m[i + 1]
    }

    fn s(&self, x: f64) -> Option<f64> {
        self.cell(x)
            .map(|(i, t)| self.hermite(i, t, &self.s, &self.ds))
    }

    fn ds(&self, x: f64) -> Option<f64> {
        self.cell(x)
            .map(|(i, t)| self.hermite(i, t, &self.logds, &self.slog).exp())
    }
}

/// Speed density `2 / (s'(x) σ²(x))`.
pub fn speed_density(spec: &DiffusionSpec, scale: &ScaleTable, x: f64) -> Result<f64> {
    spec.check_interior(x)?;
    let sig = spec.sigma(x);
    Ok(2.0 / (scale.ds(x) * sig * sig))
}

/// Which end of the state interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum End {
    Left,
    Right,
}

/// Feller classification from the two integrals
/// `Σ = ∫ |s(a) - s(e)| m(da)` (accessibility) and
/// `N = ∫ |s(z) - s(a)| m(da)` (entrance), both over `(e, z)` with `z` the anchor.
pub fn classify_boundary(
    spec: &DiffusionSpec,
    scale: &ScaleTable,
    which: End,
    tol: f64,
) -> Result<BoundaryKind> {
    let (e, s_e) = match which {
        End::Left => (spec.left, scale.s_left),
        End::Right => (spec.right, scale.s_right),
    };
    // Only convergence matters here, not the value.
    let tol = tol.max(1e-7);
    let z = spec.anchor;
    let s_z = scale.s(z);
    let m = |a: f64| {
        let sig = spec.sigma(a);
        2.0 / (scale.ds(a) * sig * sig)
    };
    let run = |f: &dyn Fn(f64) -> f64, label: &str| -> Result<bool> {
        match integrate_to_endpoint_rel(f, z, e, tol, 1e-8) {
            Ok(Improper::Converged(_)) => Ok(true),
            Ok(Improper::Diverged { .. }) => Ok(false),
            Err(err) => Err(Error::IndeterminateBoundary(format!(
                "{label} integral toward {e}: {err:?}"
            ))),
        }
    };
    // Far out the difference s_e - s(a) cancels; integrate s' over the tail instead.
    let tail = |a: f64| -> f64 {
        let direct = (scale.s(a) - s_e).abs();
        if direct > 1e-4 * s_e.abs().max(1.0) {
            return direct;
        }
        let ds = scale.ds(a);
        match integrate_to_endpoint(|u| scale.ds(u), a, e, 1e-7 * ds.max(f64::MIN_POSITIVE)) {
            Ok(Improper::Converged(v)) => v.abs(),
            _ => direct,
        }
    };
    let sigma_finite = if s_e.is_finite() {
        run(&|a: f64| tail(a) * m(a), "accessibility")?
    } else {
        false
    };
    let n_finite = run(&|a: f64| (s_z - scale.s(a)).abs() * m(a), "entrance")?;
    Ok(match (sigma_finite, n_finite) {
        (true, true) => BoundaryKind::Regular,
        (true, false) => BoundaryKind::Exit,
        (false, true) => BoundaryKind::Entrance,
        (false, false) => BoundaryKind::Natural,
    })
}

fn check_pair(scale: &ScaleTable, x: f64, y: f64) -> Result<()> {
    scale.check(x)?;
    scale.check(y)
}

/// `P^x(T_y < ∞)`.
pub fn hitting_prob(scale: &ScaleTable, x: f64, y: f64) -> Result<f64> {
    check_pair(scale, x, y)?;
    if x == y {
        return Ok(1.0);
    }
    let (sx, sy) = (scale.s(x), scale.s(y));
    let below = x < y;
    Ok(
        match (scale.s_left.is_finite(), scale.s_right.is_finite()) {
            (true, true) => {
                if below {
                    sx / sy
                } else {
                    (1.0 - sx) / (1.0 - sy)
                }
            }
            (true, false) => {
                if below {
                    sx / sy
                } else {
                    1.0
                }
            }
            (false, true) => {
                if below {
                    1.0
                } else {
                    (1.0 - sx) / (1.0 - sy)
                }
            }
            (false, false) => return Err(Error::NotTransient),
        }
        .clamp(0.0, 1.0),
    )
}

/// Potential density with respect to the speed measure; symmetric in `(x, y)`.
pub fn potential_density(scale: &ScaleTable, x: f64, y: f64) -> Result<f64> {
    check_pair(scale, x, y)?;
    let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
    Ok(
        match (scale.s_left.is_finite(), scale.s_right.is_finite()) {
            (true, true) => scale.s(lo) * (1.0 - scale.s(hi)),
            (true, false) => scale.s(lo),
            (false, true) => 1.0 - scale.s(hi),
            (false, false) => return Err(Error::NotTransient),
        },
    )
}

/// `P^y(X_∞ = r)`.
pub fn rho(scale: &ScaleTable, y: f64) -> Result<f64> {
    scale.check(y)?;
    match (scale.s_left.is_finite(), scale.s_right.is_finite()) {
        (true, true) => Ok(scale.s(y)),
        (true, false) => Ok(0.0),
        (false, true) => Ok(1.0),
        (false, false) => Err(Error::NotTransient),
    }
}

/// Rate of the exponential law of the terminal semimartingale local time at
/// `y` under `P^y`.
pub fn terminal_lt_rate(scale: &ScaleTable, y: f64) -> Result<f64> {
    let u = potential_density(scale, y, y)?;
    Ok(scale.ds(y) / (2.0 * u))
}

/// Atom at the current local time plus an exponential tail above it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedLaw {
    pub atom_location: f64,
    pub atom_mass: f64,
    pub rate: f64,
}

impl MixedLaw {
    pub fn tail_mass(&self) -> f64 {
        1.0 - self.atom_mass
    }

    pub fn density(&self, a: f64) -> f64 {
        if a < self.atom_location {
            0.0
        } else {
            self.tail_mass() * self.rate * (-self.rate * (a - self.atom_location)).exp()
        }
    }

    pub fn cdf(&self, a: f64) -> f64 {
        if a < self.atom_location {
            0.0
        } else {
            1.0 - self.tail_mass() * (-self.rate * (a - self.atom_location)).exp()
        }
    }

    pub fn mean(&self) -> f64 {
        self.atom_location + self.tail_mass() / self.rate
    }

    /// Atom mass plus the numerically integrated density.
    pub fn total_mass(&self, tol: f64) -> f64 {
        let tail =
            integrate_to_endpoint(|a| self.density(a), self.atom_location, f64::INFINITY, tol)
                .ok()
                .and_then(Improper::value)
                .unwrap_or(f64::NAN);
        self.atom_mass + tail
    }

    /// Inverse-CDF sample from a uniform `v ∈ [0, 1)`.
    pub fn quantile(&self, v: f64) -> f64 {
        if v < self.atom_mass {
            self.atom_location
        } else {
            let q = (1.0 - v) / self.tail_mass();
            self.atom_location - q.ln() / self.rate
        }
    }
}

/// Law of the terminal local time at `y` given the current state `x_now` and
/// the local time `l_now` accumulated so far.
pub fn conditional_terminal_lt_law(
    scale: &ScaleTable,
    x_now: f64,
    y: f64,
    l_now: f64,
) -> Result<MixedLaw> {
    if !(l_now >= 0.0) {
        return Err(Error::Config(format!(
            "current local time must be >= 0, got {l_now}"
        )));
    }
    let psi = hitting_prob(scale, x_now, y)?;
    Ok(MixedLaw {
        atom_location: l_now,
        atom_mass: 1.0 - psi,
        rate: terminal_lt_rate(scale, y)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bessel3, killed_bm, ou, sq_bessel};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn killed_bm_scale_and_tables() {
        let spec = killed_bm(1.0).unwrap();
        let sc = build_scale(&spec, DEFAULT_TOL).unwrap();
        assert_eq!(sc.source, ScaleSource::ClosedForm);
        assert!(close(sc.s(0.5), 0.5, 1e-15));
        assert_eq!(sc.s_left, f64::NEG_INFINITY);
        assert!(close(speed_density(&spec, &sc, 0.5).unwrap(), 2.0, 1e-12));
        assert!(close(hitting_prob(&sc, 0.5, 0.2).unwrap(), 0.625, 1e-12));
        assert_eq!(hitting_prob(&sc, 0.2, 0.5).unwrap(), 1.0);
        assert!(close(potential_density(&sc, 0.0, 0.0).unwrap(), 1.0, 1e-15));
        assert_eq!(rho(&sc, 0.0).unwrap(), 1.0);
        assert!(close(1.0 / terminal_lt_rate(&sc, 0.0).unwrap(), 2.0, 1e-12));
        let law = conditional_terminal_lt_law(&sc, 0.5, 0.2, 0.0).unwrap();
        assert!(close(law.atom_mass, 0.375, 1e-12));
    }

    #[test]
    fn killed_bm_mean_scales_with_level() {
        let spec = killed_bm(3.0).unwrap();
        let sc = build_scale(&spec, DEFAULT_TOL).unwrap();
        assert!(close(1.0 / terminal_lt_rate(&sc, 0.0).unwrap(), 6.0, 1e-12));
    }

    #[test]
    fn sq_bessel_four_values() {
        let spec = sq_bessel(4.0).unwrap();
        let sc = build_scale(&spec, DEFAULT_TOL).unwrap();
        assert!(sc.s(1.0).abs() < 1e-15);
        assert!(close(speed_density(&spec, &sc, 1.0).unwrap(), 0.5, 1e-12));
        assert!(close(potential_density(&sc, 2.0, 2.0).unwrap(), 0.5, 1e-12));
        assert!(close(terminal_lt_rate(&sc, 2.0).unwrap(), 0.25, 1e-12));
        assert_eq!(rho(&sc, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn both_finite_rate_formula() {
        let spec = ou(1.0, 0.0).unwrap();
        let sc = build_scale(&spec, DEFAULT_TOL).unwrap();
        let y = 0.3;
        let s = sc.s(y);
        let want = sc.ds(y) / (2.0 * s * (1.0 - s));
        assert!(close(terminal_lt_rate(&sc, y).unwrap(), want, 1e-14));
        assert!(close(rho(&sc, y).unwrap(), s, 0.0));
    }

    // Frozen with mpmath at 30 digits: s(x) = Φ(√2 x) for r=1, b=0.
    #[test]
    fn ou_quadrature_matches_frozen_values() {
        let spec = ou(1.0, 0.0).unwrap();
        let num = build_numeric_scale(&spec, DEFAULT_TOL).unwrap();
        let frozen = [
            (-2.0, 0.002_338_867_490_523_633),
            (-0.5, 0.23975006109347673),
            (0.0, 0.5),
            (0.25, 0.638_163_195_084_118_5),
            (1.5, 0.983_052_573_237_655_4),
        ];
        for (x, want) in frozen {
            assert!(close(num.s(x), want, 1e-8), "x={x}: {} vs {want}", num.s(x));
        }
    }

    #[test]
    fn classification_examples() {
        let b3 = bessel3();
        let sc = build_scale(&b3, DEFAULT_TOL).unwrap();
        assert_eq!(
            classify_boundary(&b3, &sc, End::Left, 1e-8).unwrap(),
            BoundaryKind::Entrance
        );
        let kbm = killed_bm(1.0).unwrap();
        let sc = build_scale(&kbm, DEFAULT_TOL).unwrap();
        assert_eq!(
            classify_boundary(&kbm, &sc, End::Right, 1e-8).unwrap(),
            BoundaryKind::Regular
        );
        let bm = crate::model::bm_drift(0.0, 0.0, f64::INFINITY).unwrap();
        let sc = build_scale(&bm, DEFAULT_TOL).unwrap();
        assert_eq!(
            classify_boundary(&bm, &sc, End::Left, 1e-8).unwrap(),
            BoundaryKind::Regular
        );
    }

    #[test]
    fn sq_bessel_boundaries() {
        let spec = sq_bessel(4.0).unwrap();
        let sc = build_scale(&spec, DEFAULT_TOL).unwrap();
        assert_eq!(
            classify_boundary(&spec, &sc, End::Left, 1e-8).unwrap(),
            BoundaryKind::Entrance
        );
        assert_eq!(
            classify_boundary(&spec, &sc, End::Right, 1e-8).unwrap(),
            BoundaryKind::Natural
        );
    }

    #[test]
    fn repelling_ou_both_natural() {
        let closed = ou(1.0, 0.0).unwrap();
        let custom = DiffusionSpec::new(
            "custom",
            f64::NEG_INFINITY,
            f64::INFINITY,
            |x| x,
            |_| 1.0,
            0.25,
        );
        for spec in [closed, custom] {
            let sc = build_scale(&spec, DEFAULT_TOL).unwrap();
            for end in [End::Left, End::Right] {
                assert_eq!(
                    classify_boundary(&spec, &sc, end, DEFAULT_TOL).unwrap(),
                    BoundaryKind::Natural
                );
            }
        }
    }

    #[test]
    fn recurrent_model_is_rejected() {
        let bm = crate::model::bm_drift(0.0, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert_eq!(
            build_scale(&bm, DEFAULT_TOL).unwrap_err(),
            Error::NotTransient
        );
    }

    #[test]
    fn drifted_bm_table_matches_closed_form() {
        // dX = dt + dB on (0, ∞): s ∝ 1 - e^{-2x}.
        let spec = crate::model::bm_drift(1.0, 0.0, f64::INFINITY).unwrap();
        let sc = build_scale(&spec, DEFAULT_TOL).unwrap();
        assert_eq!(sc.source, ScaleSource::Tabulated);
        assert!(close(sc.s_right, 1.0, 0.0));
        for x in [0.05f64, 0.3, 1.0, 2.5, 7.0] {
            let want = 1.0 - (-2.0 * x).exp();
            assert!(close(sc.s(x), want, 1e-8), "x={x}");
            assert!(close(sc.ds(x), 2.0 * (-2.0 * x).exp(), 1e-7), "x={x}");
        }
        let x = sc.inverse(0.5).unwrap();
        assert!(close(x, 0.5 * 2f64.ln(), 1e-9));
    }

    #[test]
    fn inverse_respects_range() {
        let sc = build_scale(&killed_bm(1.0).unwrap(), DEFAULT_TOL).unwrap();
        assert!(matches!(sc.inverse(1.5), Err(Error::Inversion { .. })));
        assert!(close(sc.inverse(-3.0).unwrap(), -3.0, 1e-15));
    }

    #[test]
    fn mixed_law_quantile_and_mass() {
        let law = MixedLaw {
            atom_location: 0.7,
            atom_mass: 0.3,
            rate: 2.0,
        };
        assert!(close(law.total_mass(1e-12), 1.0, 1e-9));
        assert_eq!(law.quantile(0.1), 0.7);
        let v = 0.8;
        assert!(close(law.cdf(law.quantile(v)), v, 1e-12));
    }

    #[test]
    fn domain_errors() {
        let sc = build_scale(&killed_bm(1.0).unwrap(), DEFAULT_TOL).unwrap();
        assert!(matches!(
            hitting_prob(&sc, 1.0, 0.0),
            Err(Error::Domain { .. })
        ));
        let spec = killed_bm(1.0).unwrap();
        assert!(speed_density(&spec, &sc, 1.0).is_err());
    }
}
