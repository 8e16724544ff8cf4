//! Adaptive Simpson quadrature and improper integrals toward an endpoint.
//!
//! Improper integrals are split geometrically: toward a finite endpoint the
//! remaining distance is halved at each substep, toward an infinite one the
//! substep length doubles. The integral is declared convergent once two
//! consecutive substeps contribute less than the tolerance, and divergent
//! when the partial sums blow up or no convergence is seen after
//! [`MAX_SUBSTEPS`] substeps.

/// Substep budget for improper integrals.
pub const MAX_SUBSTEPS: usize = 60;

const MAX_DEPTH: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadError {
    /// The integrand returned a non-finite value at `x`.
    NonFinite { x: f64 },
    /// Recursion depth exhausted before the local error estimate met `tol`.
    NoConvergence { a: f64, b: f64 },
}

/// Outcome of an improper integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Improper {
    Converged(f64),
    /// Partial sum at the point where divergence was declared.
    Diverged {
        partial: f64,
    },
}

impl Improper {
    pub fn value(self) -> Option<f64> {
        match self {
            Improper::Converged(v) => Some(v),
            Improper::Diverged { .. } => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Improper::Converged(_))
    }
}

fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
    h / 6.0 * (fa + 4.0 * fm + fb)
}

fn eval<F: Fn(f64) -> f64>(f: &F, x: f64) -> Result<f64, QuadError> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(QuadError::NonFinite { x })
    }
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    rel: f64,
    depth: u32,
) -> Result<f64, QuadError> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = eval(f, lm)?;
    let frm = eval(f, rm)?;
    let left = simpson(fa, flm, fm, m - a);
    let right = simpson(fm, frm, fb, b - m);
    let delta = left + right - whole;
    // Floor the local tolerance at a relative level of the panel value.
    let floor = rel * (left.abs() + right.abs());
    if delta.abs() <= 15.0 * tol.max(floor) {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 || m <= a || m >= b {
        return Err(QuadError::NoConvergence { a, b });
    }
    Ok(
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, rel, depth - 1)?
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, rel, depth - 1)?,
    )
}

/// Integrates `f` over `[a, b]` (either orientation) to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<f64, QuadError> {
    simpson_rel(f, a, b, tol, ROUNDOFF)
}

/// Roundoff-level relative floor for exact integrands.
const ROUNDOFF: f64 = 8.0 * f64::EPSILON;

/// Like [`adaptive_simpson`], with each panel's tolerance floored at `rel`
/// times the panel value; for integrands that carry their own relative noise.
pub fn simpson_rel<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    tol: f64,
    rel: f64,
) -> Result<f64, QuadError> {
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return simpson_rel(f, b, a, tol, rel).map(|v| -v);
    }
    let fa = eval(&f, a)?;
    let fb = eval(&f, b)?;
    let m = 0.5 * (a + b);
    let fm = eval(&f, m)?;
    // Seed with a four-panel split so that narrow features are not skipped.
    let q = [a, a + 0.25 * (b - a), m, a + 0.75 * (b - a), b];
    let fq = [fa, eval(&f, q[1])?, fm, eval(&f, q[3])?, fb];
    let mut total = 0.0;
    for i in 0..4 {
        let (lo, hi) = (q[i], q[i + 1]);
        let mid = 0.5 * (lo + hi);
        let fmid = eval(&f, mid)?;
        let whole = simpson(fq[i], fmid, fq[i + 1], hi - lo);
        total += recurse(
            &f,
            lo,
            hi,
            fq[i],
            fmid,
            fq[i + 1],
            whole,
            0.25 * tol,
            rel,
            MAX_DEPTH,
        )?;
    }
    Ok(total)
}

/// Integrates `f` from the interior point `from` toward `endpoint`, which may be
/// finite or infinite. The result carries the orientation sign of
/// `∫_from^endpoint`.
pub fn integrate_to_endpoint<F: Fn(f64) -> f64>(
    f: F,
    from: f64,
    endpoint: f64,
    tol: f64,
) -> Result<Improper, QuadError> {
    integrate_to_endpoint_rel(f, from, endpoint, tol, ROUNDOFF)
}

/// [`integrate_to_endpoint`] with a relative floor `rel` on each panel's
/// tolerance (see [`simpson_rel`]).
pub fn integrate_to_endpoint_rel<F: Fn(f64) -> f64>(
    f: F,
    from: f64,
    endpoint: f64,
    tol: f64,
    rel: f64,
) -> Result<Improper, QuadError> {
    if from == endpoint {
        return Ok(Improper::Converged(0.0));
    }
    let dir = if endpoint > from { 1.0 } else { -1.0 };
    let node = |k: usize| -> f64 {
        if endpoint.is_finite() {
            endpoint - (endpoint - from) * 0.5f64.powi(k as i32)
        } else {
            let h = 1.0f64.max(0.25 * from.abs());
            from + dir * h * (2f64.powi(k as i32) - 1.0)
        }
    };
    let mut sum = 0.0;
    let mut increments: Vec<f64> = Vec::with_capacity(MAX_SUBSTEPS);
    let mut small_run = 0;
    for k in 0..MAX_SUBSTEPS {
        let (a, b) = (node(k), node(k + 1));
        if a == b {
            // Ran out of floating-point resolution next to a finite endpoint.
            break;
        }
        let piece = match simpson_rel(&f, a, b, 0.25 * tol, rel) {
            Ok(v) => v,
            Err(e) => {
                if growing(&increments) {
                    return Ok(Improper::Diverged { partial: sum });
                }
                return Err(e);
            }
        };
        sum += piece;
        if !sum.is_finite() || sum.abs() > 1e150 {
            return Ok(Improper::Diverged { partial: sum });
        }
        increments.push(piece.abs());
        if steady_growth(&increments) {
            return Ok(Improper::Diverged { partial: sum });
        }
        if piece.abs() <= tol {
            small_run += 1;
            if small_run >= 2 {
                return Ok(Improper::Converged(sum));
            }
        } else {
            small_run = 0;
        }
    }
    if small_run >= 1 {
        return Ok(Improper::Converged(sum));
    }
    // Slow geometric decay: accept with the geometric tail added.
    if let Some(ratio) = tail_ratio(&increments) {
        let last = increments[increments.len() - 1];
        let tail = last * ratio / (1.0 - ratio);
        let signed_tail = if sum >= 0.0 { tail } else { -tail };
        return Ok(Improper::Converged(sum + signed_tail));
    }
    Ok(Improper::Diverged { partial: sum })
}

/// Integrates `f` over `[from, to]` when `f` may be singular at distance
/// `gap` beyond `to`. Pieces grow geometrically away from `from` on long
/// ranges, then shrink geometrically toward `to` until the remaining piece is
/// no longer than `gap`.
pub fn integrate_graded<F: Fn(f64) -> f64>(
    f: F,
    from: f64,
    to: f64,
    gap: f64,
    tol: f64,
) -> Result<f64, QuadError> {
    let len = (to - from).abs();
    if len == 0.0 {
        return Ok(0.0);
    }
    let dir = (to - from).signum();
    let mut nodes = vec![from];
    let mut step = 1.0f64.max(0.25 * from.abs());
    let mut x = from;
    while (to - x).abs() > 2.0 * step {
        x += dir * step;
        nodes.push(x);
        step *= 2.0;
    }
    while (to - x).abs() > gap {
        let next = x + 0.5 * (to - x);
        if next == x || next == to {
            break;
        }
        x = next;
        nodes.push(x);
    }
    nodes.push(to);
    let piece_tol = tol / (nodes.len() - 1) as f64;
    let mut total = 0.0;
    for w in nodes.windows(2) {
        total += adaptive_simpson(&f, w[0], w[1], piece_tol)?;
    }
    Ok(total)
}

fn tail_ratio(incs: &[f64]) -> Option<f64> {
    let n = incs.len();
    if n < 4 {
        return None;
    }
    let r1 = incs[n - 1] / incs[n - 2];
    let r2 = incs[n - 2] / incs[n - 3];
    (r1 < 0.95 && r2 < 0.95).then_some(r1.max(r2))
}

/// Twelve consecutive non-shrinking increments: logarithmic or faster
/// divergence.
fn steady_growth(incs: &[f64]) -> bool {
    const RUN: usize = 12;
    let n = incs.len();
    n > RUN
        && incs[n - RUN - 1] > 0.0
        && incs[n - RUN..]
            .iter()
            .zip(&incs[n - RUN - 1..])
            .all(|(b, a)| *b >= 0.999 * a)
}

/// Increments that fail to shrink geometrically signal divergence.
fn growing(incs: &[f64]) -> bool {
    let n = incs.len();
    n >= 3 && incs[n - 1] >= 0.5 * incs[n - 2] && incs[n - 2] >= 0.5 * incs[n - 3]
}
