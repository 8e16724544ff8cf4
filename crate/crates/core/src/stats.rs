//! Goodness-of-fit tests and test reports for Monte Carlo batches.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const MIN_KS_N: usize = 50;
pub const MIN_BERNOULLI_N: usize = 100;

/// Kolmogorov survival function `Q(λ) = 2 Σ (-1)^{k-1} exp(-2 k² λ²)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = sign * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 * sum.abs().max(1e-300) {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic p-value with Stephens' small-sample correction.
fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let sq = n_eff.sqrt();
    kolmogorov_q((sq + 0.12 + 0.11 / sq) * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Fraction of samples equal to their predecessor after sorting.
    pub tie_fraction: f64,
}

impl KsResult {
    pub fn ties_warning(&self) -> Option<String> {
        (self.tie_fraction > 0.01)
            .then(|| format!("{:.1}% tied samples", 100.0 * self.tie_fraction))
    }
}

fn sorted_finite(xs: &[f64], what: &str) -> Result<Vec<f64>> {
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::Config(format!("{what}: NaN sample")));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn tie_fraction(sorted: &[f64]) -> f64 {
    if sorted.len() < 2 {
        return 0.0;
    }
    let ties = sorted.windows(2).filter(|w| w[0] == w[1]).count();
    ties as f64 / sorted.len() as f64
}

pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    if samples.len() < MIN_KS_N {
        return Err(Error::Config(format!(
            "one-sample KS needs at least {MIN_KS_N} samples, got {}",
            samples.len()
        )));
    }
    let v = sorted_finite(samples, "one-sample KS")?;
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(KsResult {
        statistic: d,
        p_value: ks_p_value(d, n),
        tie_fraction: tie_fraction(&v),
    })
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.len().min(b.len()) < MIN_KS_N {
        return Err(Error::Config(format!(
            "two-sample KS needs at least {MIN_KS_N} samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let a = sorted_finite(a, "two-sample KS")?;
    let b = sorted_finite(b, "two-sample KS")?;
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / n1 - j as f64 / n2).abs());
    }
    let mut all = [a.as_slice(), b.as_slice()].concat();
    all.sort_by(f64::total_cmp);
    Ok(KsResult {
        statistic: d,
        p_value: ks_p_value(d, n1 * n2 / (n1 + n2)),
        tie_fraction: tie_fraction(&all),
    })
}

/// One line of a validation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub name: String,
    /// What the samples are compared against.
    pub oracle: String,
    pub statistic: f64,
    pub p_value: Option<f64>,
    pub n: usize,
    pub n2: Option<usize>,
    pub alpha: f64,
    pub passed: bool,
    pub inconclusive: bool,
    pub notes: Vec<String>,
}

impl TestEntry {
    pub fn new(name: impl Into<String>, oracle: impl Into<String>, alpha: f64) -> Self {
        TestEntry {
            name: name.into(),
            oracle: oracle.into(),
            statistic: f64::NAN,
            p_value: None,
            n: 0,
            n2: None,
            alpha,
            passed: false,
            inconclusive: false,
            notes: Vec::new(),
        }
    }

    /// Entry for a non-rejection test: passes when `p > alpha`.
    pub fn from_ks(
        name: impl Into<String>,
        oracle: impl Into<String>,
        ks: KsResult,
        n: usize,
        n2: Option<usize>,
        alpha: f64,
    ) -> Self {
        let mut e = TestEntry::new(name, oracle, alpha);
        e.statistic = ks.statistic;
        e.p_value = Some(ks.p_value);
        e.n = n;
        e.n2 = n2;
        e.passed = ks.p_value > alpha;
        e.notes.extend(ks.ties_warning());
        e
    }

    /// Entry for a tolerance check: `statistic` is the discrepancy.
    pub fn tolerance(
        name: impl Into<String>,
        oracle: impl Into<String>,
        discrepancy: f64,
        tol: f64,
        n: usize,
    ) -> Self {
        let mut e = TestEntry::new(name, oracle, 0.0);
        e.statistic = discrepancy;
        e.n = n;
        e.passed = discrepancy.abs() <= tol;
        e.notes.push(format!("tolerance {tol:.3e}"));
        e
    }

    pub fn note(mut self, s: impl Into<String>) -> Self {
        self.notes.push(s.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub entries: Vec<TestEntry>,
}

impl TestReport {
    pub fn push(&mut self, e: TestEntry) {
        self.entries.push(e);
    }

    pub fn extend(&mut self, other: TestReport) {
        self.entries.extend(other.entries);
    }

    /// Inconclusive entries do not count as failures.
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed || e.inconclusive)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for TestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(0)
            .max(44);
        writeln!(
            f,
            "{:<w$} {:>10} {:>10} {:>7} {:>7}  result",
            "test", "statistic", "p-value", "n", "n2"
        )?;
        for e in &self.entries {
            let p = e.p_value.map_or("-".to_string(), |p| format!("{p:.4}"));
            let n2 = e.n2.map_or("-".to_string(), |n| n.to_string());
            let verdict = if e.inconclusive {
                "INCONCLUSIVE"
            } else if e.passed {
                "PASS"
            } else {
                "FAIL"
            };
            writeln!(
                f,
                "{:<w$} {:>10.4e} {:>10} {:>7} {:>7}  {verdict}",
                e.name, e.statistic, p, e.n, n2
            )?;
        }
        Ok(())
    }
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// KS against `Exp(rate)` plus the sample mean within 3 SE of `1/rate`.
pub fn exp_fit_check(name: &str, samples: &[f64], rate: f64, alpha: f64) -> Result<TestEntry> {
    if !(rate > 0.0) {
        return Err(Error::Config(format!("rate must be positive, got {rate}")));
    }
    let ks = ks_one_sample(samples, |t| {
        if t <= 0.0 {
            0.0
        } else {
            1.0 - (-rate * t).exp()
        }
    })?;
    let (m, se) = mean_se(samples);
    let mean_ok = (m - 1.0 / rate).abs() <= 3.0 * se;
    let mut e = TestEntry::from_ks(
        name,
        format!("exponential, mean {:.6}", 1.0 / rate),
        ks,
        samples.len(),
        None,
        alpha,
    );
    e.passed = e.passed && mean_ok;
    e.notes.push(format!("mean {m:.5} +/- {se:.5}"));
    Ok(e)
}

/// Two-sided normal-approximation test of a success frequency.
pub fn bernoulli_check(name: &str, ones: usize, n: usize, p: f64, alpha: f64) -> Result<TestEntry> {
    if n < MIN_BERNOULLI_N {
        return Err(Error::Config(format!(
            "Bernoulli check needs n >= {MIN_BERNOULLI_N}, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&p) || ones > n {
        return Err(Error::Config(format!(
            "invalid Bernoulli check: {ones}/{n} against p={p}"
        )));
    }
    let freq = ones as f64 / n as f64;
    let mut e = TestEntry::new(name, format!("Bernoulli({p:.6})"), alpha);
    e.n = n;
    e.statistic = freq - p;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    let pv = if sd == 0.0 {
        if freq == p {
            1.0
        } else {
            0.0
        }
    } else {
        let z = (freq - p).abs() / sd;
        2.0 * (1.0 - Normal::standard().cdf(z))
    };
    e.p_value = Some(pv);
    e.passed = pv > alpha;
    e.notes.push(format!("frequency {freq:.5}"));
    Ok(e)
}

/// Merges the same entry run under several seeds: passes when at least
/// `need` of them pass. Statistic and p-value are the median run's.
pub fn majority(runs: Vec<TestEntry>, need: usize) -> TestEntry {
    assert!(!runs.is_empty());
    let passes = runs.iter().filter(|e| e.passed).count();
    let inconclusive = runs.iter().all(|e| e.inconclusive);
    let mut sorted = runs.clone();
    sorted.sort_by(|a, b| {
        a.p_value
            .unwrap_or(a.statistic)
            .total_cmp(&b.p_value.unwrap_or(b.statistic))
    });
    let mut e = sorted[sorted.len() / 2].clone();
    e.passed = passes >= need;
    e.inconclusive = inconclusive;
    e.notes
        .push(format!("{passes}/{} seeds passed", runs.len()));
    e
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return f64::NAN;
    }
    let (ma, _) = mean_se(&a[..n]);
    let (mb, _) = mean_se(&b[..n]);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    sab / (saa * sbb).sqrt()
}
