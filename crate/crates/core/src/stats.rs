//! Exact Wilcoxon signed-rank, one-sided one-sample t-test, SEM and
//! significance flags.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{validation, Error, Result};
use crate::matrix::compensated_sum;

/// Largest sample size handled by exact enumeration.
pub const EXACT_WILCOXON_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    Greater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of positive differences.
    pub w_plus: f64,
    pub w_minus: f64,
    /// Differences left after dropping zeros.
    pub n: usize,
    pub p: f64,
}

fn require_finite(x: &[f64], what: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(validation(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Average ranks of `|d|` (1-based), ties share their mean rank.
fn abs_ranks(d: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact signed-rank test. Zero differences are dropped; ties get average
/// ranks and the null distribution is enumerated over all `2^n` sign
/// assignments of those ranks.
pub fn wilcoxon_signed_rank(diffs: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    require_finite(diffs, "differences")?;
    let d: Vec<f64> = diffs.iter().copied().filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::UndefinedTest("all differences are zero".into()));
    }
    if n > EXACT_WILCOXON_MAX_N {
        return Err(validation(format!(
            "exact signed-rank test supports n <= {EXACT_WILCOXON_MAX_N}, got {n}"
        )));
    }
    let ranks = abs_ranks(&d);
    // doubled ranks are integers even with half-rank ties
    let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r) as u64).collect();
    let w2: u64 = d.iter().zip(&doubled).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total2: u64 = doubled.iter().sum();
    let (mut ge, mut le) = (0u64, 0u64);
    for pattern in 0u64..(1 << n) {
        let s: u64 = (0..n).filter(|i| pattern & (1 << i) != 0).map(|i| doubled[i]).sum();
        if s >= w2 {
            ge += 1;
        }
        if s <= w2 {
            le += 1;
        }
    }
    let total = (1u64 << n) as f64;
    let p_greater = ge as f64 / total;
    let p = match alternative {
        Alternative::Greater => p_greater,
        Alternative::TwoSided => (2.0 * (ge.min(le) as f64) / total).min(1.0),
    };
    Ok(WilcoxonResult {
        w_plus: w2 as f64 / 2.0,
        w_minus: (total2 - w2) as f64 / 2.0,
        n,
        p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub mean: f64,
    pub p: f64,
}

fn mean(v: &[f64]) -> f64 {
    compensated_sum(v.iter().copied()) / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (compensated_sum(v.iter().map(|x| (x - m) * (x - m))) / (v.len() - 1) as f64).sqrt()
}

fn t_density(x: f64, df: f64) -> f64 {
    let log_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    (log_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp()
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive_simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// `P(T > t)` for Student's t with `df` degrees of freedom, by adaptive
/// Simpson integration of the density over `[0, |t|]`.
pub fn student_t_upper_tail(t: f64, df: usize) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    let nu = df as f64;
    let f = |x: f64| t_density(x, nu);
    let b = t.abs();
    // integrate in unit pieces so steep tails stay resolved
    let pieces = b.ceil().max(1.0) as usize;
    let h = b / pieces as f64;
    let mut mass = 0.0;
    for i in 0..pieces {
        let (lo, hi) = (i as f64 * h, (i + 1) as f64 * h);
        let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
        mass += adaptive_simpson(&f, lo, hi, fa, fm, fb, simpson(lo, hi, fa, fm, fb), 1e-13, 40);
    }
    let upper = (0.5 - mass).max(0.0);
    if t >= 0.0 {
        upper
    } else {
        1.0 - upper
    }
}

/// One-sided (mean > 0) one-sample t-test. With zero spread the p-value is
/// 0 for a positive mean, 1 for a negative mean, undefined for zero.
pub fn one_sample_ttest_onesided(diffs: &[f64]) -> Result<TTestResult> {
    require_finite(diffs, "differences")?;
    let n = diffs.len();
    if n < 2 {
        return Err(validation(format!("t-test needs n >= 2, got {n}")));
    }
    let m = mean(diffs);
    let sd = sample_sd(diffs);
    let df = n - 1;
    if sd == 0.0 {
        return match m {
            m if m > 0.0 => Ok(TTestResult {
                t: f64::INFINITY,
                df,
                mean: m,
                p: 0.0,
            }),
            m if m < 0.0 => Ok(TTestResult {
                t: f64::NEG_INFINITY,
                df,
                mean: m,
                p: 1.0,
            }),
            _ => Err(Error::UndefinedTest("zero mean with zero spread".into())),
        };
    }
    let t = m / (sd / (n as f64).sqrt());
    Ok(TTestResult {
        t,
        df,
        mean: m,
        p: student_t_upper_tail(t, df),
    })
}

/// Standard error of the mean, `sd / sqrt(n)` with the `n - 1` sample sd.
pub fn sem(values: &[f64]) -> Result<f64> {
    require_finite(values, "values")?;
    if values.len() < 2 {
        return Err(validation("SEM needs at least 2 values"));
    }
    Ok(sample_sd(values) / (values.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Significance {
    #[serde(rename = "ns")]
    NotSignificant,
    #[serde(rename = "*")]
    P05,
    #[serde(rename = "**")]
    P01,
}

impl Significance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Significance::NotSignificant => "ns",
            Significance::P05 => "*",
            Significance::P01 => "**",
        }
    }
}

impl std::fmt::Display for Significance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn flag_significance(p: f64) -> Significance {
    if p < 0.01 {
        Significance::P01
    } else if p < 0.05 {
        Significance::P05
    } else {
        Significance::NotSignificant
    }
}
