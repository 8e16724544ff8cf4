//! Diffusion coefficients, builtin models and the JSON spec-file schema.

use std::fmt;
use std::path::Path as FsPath;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::erf::{erf_inv, erfc};

use crate::error::{Error, Result};
use crate::quadrature::adaptive_simpson;

pub type Coef = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Closed-form scale pieces supplied by a model. `inverse` is optional and
/// only used to speed up exact entrance launches.
#[derive(Clone)]
pub struct ClosedScale {
    pub s: Coef,
    pub ds: Coef,
    pub inverse: Option<Coef>,
    /// s(l+) and s(r-) as extended reals.
    pub s_left: f64,
    pub s_right: f64,
}

/// A one-dimensional diffusion `dX = b(X) dt + σ(X) dB` on `(left, right)`,
/// killed on reaching an accessible endpoint.
#[derive(Clone)]
pub struct DiffusionSpec {
    pub name: String,
    pub left: f64,
    pub right: f64,
    pub drift: Coef,
    pub sigma: Coef,
    pub closed_form_scale: Option<ClosedScale>,
    /// Base point of the scale quadrature.
    pub anchor: f64,
}

impl fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionSpec")
            .field("name", &self.name)
            .field("left", &self.left)
            .field("right", &self.right)
            .field("anchor", &self.anchor)
            .field("closed_form_scale", &self.closed_form_scale.is_some())
            .finish()
    }
}

impl DiffusionSpec {
    pub fn new(
        name: impl Into<String>,
        left: f64,
        right: f64,
        drift: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        anchor: f64,
    ) -> Self {
        DiffusionSpec {
            name: name.into(),
            left,
            right,
            drift: Arc::new(drift),
            sigma: Arc::new(sigma),
            closed_form_scale: None,
            anchor,
        }
    }

    pub fn with_closed_scale(mut self, scale: ClosedScale) -> Self {
        self.closed_form_scale = Some(scale);
        self
    }

    pub fn with_anchor(mut self, anchor: f64) -> Self {
        self.anchor = anchor;
        self
    }

    #[inline]
    pub fn b(&self, x: f64) -> f64 {
        (self.drift)(x)
    }

    #[inline]
    pub fn sigma(&self, x: f64) -> f64 {
        (self.sigma)(x)
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.left && x < self.right
    }

    pub fn check_interior(&self, x: f64) -> Result<()> {
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

    /// Same coefficients restricted to a sub-interval; the closed-form scale
    /// is dropped because its normalization no longer applies.
    pub fn restricted(&self, left: f64, right: f64) -> DiffusionSpec {
        DiffusionSpec {
            name: format!("{}|({left},{right})", self.name),
            left,
            right,
            drift: self.drift.clone(),
            sigma: self.sigma.clone(),
            closed_form_scale: None,
            anchor: 0.5 * (left + right),
        }
    }

    /// Checks the Engelbert–Schmidt conditions on a probe grid: σ > 0 and
    /// local integrability of (1+|b|)/σ² around every probe point.
    pub fn validate(&self, probes: &[f64]) -> Result<()> {
        if !(self.left < self.right) {
            return Err(Error::InvalidSpec(format!(
                "empty state interval ({}, {})",
                self.left, self.right
            )));
        }
        self.check_interior(self.anchor).map_err(|_| {
            Error::InvalidSpec(format!("anchor {} outside state interval", self.anchor))
        })?;
        for &x in probes {
            if !self.contains(x) {
                continue;
            }
            let sig = self.sigma(x);
            if !(sig > 0.0) || !sig.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "sigma({x}) = {sig} is not positive"
                )));
            }
            let half = local_radius(self.left, self.right, x);
            let integrand = |z: f64| (1.0 + self.b(z).abs()) / self.sigma(z).powi(2);
            match adaptive_simpson(integrand, x - half, x + half, 1e-8) {
                Ok(v) if v.is_finite() => {}
                _ => {
                    return Err(Error::InvalidSpec(format!(
                        "(1+|b|)/sigma^2 is not integrable around {x}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// A default probe grid spread across the state interval.
    pub fn probe_grid(&self, n: usize) -> Vec<f64> {
        let (lo, hi) = window(self.left, self.right, self.anchor);
        (0..n)
            .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64)
            .collect()
    }
}

/// A finite window of interest inside `(left, right)` around `anchor`.
pub fn window(left: f64, right: f64, anchor: f64) -> (f64, f64) {
    let span = 4.0 * (1.0 + anchor.abs());
    let lo = if left.is_finite() {
        left + 1e-3 * (right.min(anchor + span) - left)
    } else {
        anchor - span
    };
    let hi = if right.is_finite() {
        right - 1e-3 * (right - left.max(anchor - span))
    } else {
        anchor + span
    };
    (lo, hi)
}

fn local_radius(left: f64, right: f64, x: f64) -> f64 {
    let mut r: f64 = 0.05 * (1.0 + x.abs());
    if left.is_finite() {
        r = r.min(0.5 * (x - left));
    }
    if right.is_finite() {
        r = r.min(0.5 * (right - x));
    }
    r
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Brownian motion on `(-∞, b)` killed at `b`.
pub fn killed_bm(b: f64) -> Result<DiffusionSpec> {
    if !(b > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "killed_bm needs b > 0, got {b}"
        )));
    }
    let inv_b = 1.0 / b;
    Ok(
        DiffusionSpec::new("killed_bm", f64::NEG_INFINITY, b, |_| 0.0, |_| 1.0, 0.0)
            .with_closed_scale(ClosedScale {
                s: Arc::new(move |x| x * inv_b),
                ds: Arc::new(move |_| inv_b),
                inverse: Some(Arc::new(move |v| v * b)),
                s_left: f64::NEG_INFINITY,
                s_right: 1.0,
            }),
    )
}

/// Ornstein–Uhlenbeck `dX = (r X + b) dt + dB` with `r > 0` (repelling).
pub fn ou(r_coef: f64, b_coef: f64) -> Result<DiffusionSpec> {
    if !(r_coef > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "ou needs r_coef > 0, got {r_coef}"
        )));
    }
    let shift = b_coef / r_coef;
    let k = (2.0 * r_coef).sqrt();
    let norm = (r_coef / std::f64::consts::PI).sqrt();
    Ok(DiffusionSpec::new(
        "ou",
        f64::NEG_INFINITY,
        f64::INFINITY,
        move |x| r_coef * x + b_coef,
        |_| 1.0,
        -shift,
    )
    .with_closed_scale(ClosedScale {
        s: Arc::new(move |x| std_normal_cdf(k * (x + shift))),
        ds: Arc::new(move |x| norm * (-r_coef * (x + shift).powi(2)).exp()),
        inverse: Some(Arc::new(move |v: f64| {
            std::f64::consts::SQRT_2 * erf_inv(2.0 * v - 1.0) / k - shift
        })),
        s_left: 0.0,
        s_right: 1.0,
    }))
}

/// Squared Bessel process `dX = δ dt + 2 √X dB` on `(0, ∞)`, killed at 0 when
/// 0 is accessible.
pub fn sq_bessel(delta: f64) -> Result<DiffusionSpec> {
    if !(delta > 0.0) || delta == 2.0 {
        return Err(Error::InvalidSpec(format!(
            "sq_bessel needs delta > 0 and delta != 2 (recurrent), got {delta}"
        )));
    }
    let nu = (2.0 - delta) / 2.0;
    let spec = DiffusionSpec::new(
        "sq_bessel",
        0.0,
        f64::INFINITY,
        move |_| delta,
        |x: f64| 2.0 * x.max(0.0).sqrt(),
        1.0,
    );
    let scale = if delta > 2.0 {
        // s = 1 - x^{(2-δ)/2}
        ClosedScale {
            s: Arc::new(move |x: f64| 1.0 - x.powf(nu)),
            ds: Arc::new(move |x: f64| -nu * x.powf(nu - 1.0)),
            inverse: Some(Arc::new(move |v: f64| (1.0 - v).powf(1.0 / nu))),
            s_left: f64::NEG_INFINITY,
            s_right: 1.0,
        }
    } else {
        ClosedScale {
            s: Arc::new(move |x: f64| x.powf(nu)),
            ds: Arc::new(move |x: f64| nu * x.powf(nu - 1.0)),
            inverse: Some(Arc::new(move |v: f64| v.powf(1.0 / nu))),
            s_left: 0.0,
            s_right: f64::INFINITY,
        }
    };
    Ok(spec.with_closed_scale(scale))
}

/// Three-dimensional Bessel process `dR = dB + dt / R` on `(0, ∞)`.
pub fn bessel3() -> DiffusionSpec {
    DiffusionSpec::new("bessel3", 0.0, f64::INFINITY, |x| 1.0 / x, |_| 1.0, 1.0).with_closed_scale(
        ClosedScale {
            s: Arc::new(|x| 1.0 - 1.0 / x),
            ds: Arc::new(|x| 1.0 / (x * x)),
            inverse: Some(Arc::new(|v| 1.0 / (1.0 - v))),
            s_left: f64::NEG_INFINITY,
            s_right: 1.0,
        },
    )
}

/// Brownian motion with constant drift `mu` on `(left, right)`.
pub fn bm_drift(mu: f64, left: f64, right: f64) -> Result<DiffusionSpec> {
    if !(left < right) {
        return Err(Error::InvalidSpec(format!(
            "empty interval ({left}, {right})"
        )));
    }
    let anchor = match (left.is_finite(), right.is_finite()) {
        (true, true) => 0.5 * (left + right),
        (true, false) => left + 1.0,
        (false, true) => right - 1.0,
        (false, false) => 0.0,
    };
    Ok(DiffusionSpec::new(
        "bm_drift",
        left,
        right,
        move |_| mu,
        |_| 1.0,
        anchor,
    ))
}

fn poly(coeffs: Vec<f64>) -> impl Fn(f64) -> f64 + Send + Sync + 'static {
    move |x| coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Extended-real encoding for spec files: a number, `"inf"`, `"-inf"` or null.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExtReal(pub Option<f64>);

impl Serialize for ExtReal {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            None => ser.serialize_none(),
            Some(v) if v == f64::INFINITY => ser.serialize_str("inf"),
            Some(v) if v == f64::NEG_INFINITY => ser.serialize_str("-inf"),
            Some(v) => ser.serialize_f64(v),
        }
    }
}

impl<'de> Deserialize<'de> for ExtReal {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let raw = Option::<Raw>::deserialize(de)?;
        Ok(ExtReal(match raw {
            None => None,
            Some(Raw::Num(v)) => Some(v),
            Some(Raw::Str(s)) => match s.trim() {
                "inf" | "+inf" | "infinity" => Some(f64::INFINITY),
                "-inf" | "-infinity" => Some(f64::NEG_INFINITY),
                other => {
                    return Err(serde::de::Error::custom(format!(
                        "not an extended real: {other}"
                    )))
                }
            },
        }))
    }
}

/// Drift transformations that may accompany a spec file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TransformKind {
    Recurrent { y: f64 },
    BesselLow { y: f64 },
    BesselHigh { y: f64 },
    CondExitLow { y: f64 },
    CondExitHigh { y: f64 },
}

impl TransformKind {
    pub fn level(&self) -> f64 {
        match *self {
            TransformKind::Recurrent { y }
            | TransformKind::BesselLow { y }
            | TransformKind::BesselHigh { y }
            | TransformKind::CondExitLow { y }
            | TransformKind::CondExitHigh { y } => y,
        }
    }
}

/// On-disk diffusion description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecFile {
    pub model: String,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub l: ExtReal,
    #[serde(default)]
    pub r: ExtReal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformKind>,
}

impl SpecFile {
    pub fn load(path: &FsPath) -> Result<SpecFile> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn builtin(model: &str, params: &[(&str, f64)]) -> SpecFile {
        SpecFile {
            model: model.to_string(),
            params: params
                .iter()
                .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
                .collect(),
            l: ExtReal(None),
            r: ExtReal(None),
            anchor: None,
            transform: None,
        }
    }

    fn num(&self, key: &str) -> Result<f64> {
        self.params
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| {
                Error::InvalidSpec(format!("model {} needs numeric param '{key}'", self.model))
            })
    }

    fn num_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::InvalidSpec(format!("param '{key}' must be numeric"))),
        }
    }

    fn coeffs(&self, key: &str) -> Result<Vec<f64>> {
        let arr = self
            .params
            .get(key)
            .and_then(|v| v.as_array())
            .ok_or_else(|| {
                Error::InvalidSpec(format!("custom model needs coefficient array '{key}'"))
            })?;
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| Error::InvalidSpec(format!("'{key}' must hold numbers")))
            })
            .collect()
    }

    /// Builds and validates the diffusion.
    pub fn to_spec(&self) -> Result<DiffusionSpec> {
        let mut spec = match self.model.as_str() {
            "killed_bm" => killed_bm(self.num("b")?)?,
            "ou" => ou(self.num("r_coef")?, self.num_or("b_coef", 0.0)?)?,
            "sq_bessel" => sq_bessel(self.num("delta")?)?,
            "bessel3" => bessel3(),
            "bm_drift" => {
                let l = self.l.0.unwrap_or(f64::NEG_INFINITY);
                let r = self.r.0.unwrap_or(f64::INFINITY);
                bm_drift(self.num_or("mu", 0.0)?, l, r)?
            }
            "custom" => {
                let l = self
                    .l
                    .0
                    .ok_or_else(|| Error::InvalidSpec("custom model needs 'l'".into()))?;
                let r = self
                    .r
                    .0
                    .ok_or_else(|| Error::InvalidSpec("custom model needs 'r'".into()))?;
                let anchor = self
                    .anchor
                    .ok_or_else(|| Error::InvalidSpec("custom model needs 'anchor'".into()))?;
                DiffusionSpec::new(
                    "custom",
                    l,
                    r,
                    poly(self.coeffs("drift")?),
                    poly(self.coeffs("sigma")?),
                    anchor,
                )
            }
            other => return Err(Error::InvalidSpec(format!("unknown model '{other}'"))),
        };
        if self.model != "custom" && self.model != "bm_drift" {
            for (given, actual, side) in [(self.l.0, spec.left, "l"), (self.r.0, spec.right, "r")] {
                if let Some(v) = given {
                    if v != actual {
                        return Err(Error::InvalidSpec(format!(
                            "model {} has {side} = {actual}, spec file says {v}",
                            self.model
                        )));
                    }
                }
            }
        }
        if let Some(a) = self.anchor {
            spec = spec.with_anchor(a);
        }
        spec.validate(&spec.probe_grid(64))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_killed_bm_scale() {
        let spec = killed_bm(1.0).unwrap();
        let sc = spec.closed_form_scale.as_ref().unwrap();
        assert_eq!((sc.s)(0.5), 0.5);
    }

    #[test]
    fn builtin_sq_bessel_scale_at_one() {
        let spec = sq_bessel(4.0).unwrap();
        let sc = spec.closed_form_scale.as_ref().unwrap();
        assert!((sc.s)(1.0).abs() < 1e-15);
        assert!(((sc.ds)(2.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ou_inverse_scale_roundtrip() {
        let spec = ou(1.3, -0.4).unwrap();
        let sc = spec.closed_form_scale.as_ref().unwrap();
        let inv = sc.inverse.as_ref().unwrap();
        for x in [-1.5, -0.2, 0.0, 0.7, 1.9] {
            assert!((inv((sc.s)(x)) - x).abs() < 1e-9);
        }
    }

    #[test]
    fn spec_file_parses_infinite_endpoints() {
        let text = r#"{"model":"custom","params":{"drift":[0.0],"sigma":[1.0]},"l":"-inf","r":1.0,"anchor":0.0}"#;
        let f: SpecFile = serde_json::from_str(text).unwrap();
        let spec = f.to_spec().unwrap();
        assert_eq!(spec.left, f64::NEG_INFINITY);
        assert_eq!(spec.right, 1.0);
        let back = serde_json::to_string(&f).unwrap();
        assert!(back.contains("\"-inf\""));
    }

    #[test]
    fn spec_file_with_transform() {
        let text = r#"{"model":"killed_bm","params":{"b":1.0},"transform":{"kind":"bessel_high","y":0.0}}"#;
        let f: SpecFile = serde_json::from_str(text).unwrap();
        assert_eq!(f.transform, Some(TransformKind::BesselHigh { y: 0.0 }));
    }

    #[test]
    fn zero_sigma_region_is_rejected() {
        let text = r#"{"model":"custom","params":{"drift":[0.0],"sigma":[0.0, 1.0]},"l":-1.0,"r":1.0,"anchor":0.5}"#;
        let f: SpecFile = serde_json::from_str(text).unwrap();
        assert!(matches!(f.to_spec(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn mismatched_builtin_endpoint_is_rejected() {
        let text = r#"{"model":"killed_bm","params":{"b":1.0},"r":2.0}"#;
        let f: SpecFile = serde_json::from_str(text).unwrap();
        assert!(f.to_spec().is_err());
    }
}
