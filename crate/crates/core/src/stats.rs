//! Clustering metrics and statistical tests.
//!
//! * [`adjusted_rand_index`] — closed-form ARI from a contingency table,
//!   exact integer combinatorics (u128) up to the `N ≤ 1e6` guard.
//! * [`homogeneity`] — entropy-based cluster purity in nats.
//! * [`bootstrap_metric`] — paired bootstrap over subjects with derived
//!   per-resample seeds, parallel-safe and order-independent.
//! * [`welch_ttest`] — Welch's unequal-variance t-test with
//!   Welch–Satterthwaite degrees of freedom; p-values via the regularized
//!   incomplete beta function (continued fraction, 1e-10 tolerance).

use serde::{Deserialize, Serialize};

use crate::parallel::par_map_indexed;
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Exact-combinatorics guard: above this many samples the `C(n,2)` sums
/// would still fit u128, but the f64 division in the ARI could lose the
/// claimed precision, so refuse loudly.
const MAX_LABELS: usize = 1_000_000;

// ───────────────────────── contingency table ─────────────────────────

/// Cross-tabulation of two labelings over the same `n` items.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    /// `counts[i][j]` = items with true label `i` and predicted label `j`.
    counts: Vec<Vec<u64>>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    n: u64,
}

impl ContingencyTable {
    /// Build from two equal-length label vectors. Labels need not be
    /// contiguous; they are compacted by first appearance.
    pub fn from_labels(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Config(format!(
                "label vectors differ in length: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        if a.is_empty() {
            return Err(Error::Config("empty label vectors".into()));
        }
        if a.len() > MAX_LABELS {
            return Err(Error::Config(format!(
                "{} samples exceed the {MAX_LABELS} exact-arithmetic guard",
                a.len()
            )));
        }
        let ra = compact(a);
        let rb = compact(b);
        let nr = 1 + ra.iter().copied().max().unwrap();
        let nc = 1 + rb.iter().copied().max().unwrap();
        let mut counts = vec![vec![0u64; nc]; nr];
        for (i, j) in ra.iter().zip(&rb) {
            counts[*i][*j] += 1;
        }
        let row_sums: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<u64> = (0..nc)
            .map(|j| counts.iter().map(|r| r[j]).sum())
            .collect();
        Ok(ContingencyTable {
            counts,
            row_sums,
            col_sums,
            n: a.len() as u64,
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn n_rows(&self) -> usize {
        self.counts.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_sums.len()
    }
}

/// Remap arbitrary labels to `0..k` by order of first appearance.
fn compact(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::BTreeMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let next = map.len();
        let id = *map.entry(l).or_insert(next);
        out.push(id);
    }
    out
}

/// `C(n, 2)` in u128 — exact for any u64 count.
fn choose2(n: u64) -> u128 {
    if n < 2 {
        return 0;
    }
    let n = n as u128;
    n * (n - 1) / 2
}

// ───────────────────────── adjusted Rand index ─────────────────────────

/// Adjusted Rand index between two labelings.
///
/// Computed in closed form from the contingency table:
/// `(Σij C(nij,2) − E) / (M − E)` with `E = Σi C(ai,2) Σj C(bj,2) / C(n,2)`
/// and `M = (Σi C(ai,2) + Σj C(bj,2)) / 2`. The combinatorial sums are
/// exact u128 integers; only the final ratio is floating point. The
/// degenerate case `M − E = 0` (e.g. both labelings put everything in one
/// cluster, or n = 1) returns 1.0 by convention: the labelings agree as
/// completely as they can.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(a, b)?;
    Ok(ari_from_table(&table))
}

/// ARI from a pre-built contingency table.
pub fn ari_from_table(t: &ContingencyTable) -> f64 {
    let sum_ij: u128 = t
        .counts
        .iter()
        .flat_map(|r| r.iter())
        .map(|&c| choose2(c))
        .sum();
    let sum_a: u128 = t.row_sums.iter().map(|&c| choose2(c)).sum();
    let sum_b: u128 = t.col_sums.iter().map(|&c| choose2(c)).sum();
    let c2n = choose2(t.n);
    if c2n == 0 {
        return 1.0; // single item: nothing to disagree about
    }
    let expected = (sum_a as f64) * (sum_b as f64) / (c2n as f64);
    let max_index = 0.5 * (sum_a as f64 + sum_b as f64);
    let denom = max_index - expected;
    if denom == 0.0 {
        return 1.0;
    }
    ((sum_ij as f64) - expected) / denom
}

// ───────────────────────── homogeneity ─────────────────────────

/// Homogeneity `1 − H(true|pred) / H(true)` with entropies in nats.
///
/// 1.0 when every predicted cluster contains members of a single true
/// class; also 1.0 by convention when there is only one true class
/// (`H(true) = 0`).
pub fn homogeneity(labels_true: &[usize], labels_pred: &[usize]) -> Result<f64> {
    let t = ContingencyTable::from_labels(labels_true, labels_pred)?;
    let n = t.n as f64;
    let h_true: f64 = t
        .row_sums
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    if h_true == 0.0 {
        return Ok(1.0);
    }
    let mut h_cond = 0.0;
    for j in 0..t.n_cols() {
        let bj = t.col_sums[j] as f64;
        if bj == 0.0 {
            continue;
        }
        for row in &t.counts {
            let c = row[j] as f64;
            if c > 0.0 {
                h_cond -= (c / n) * (c / bj).ln();
            }
        }
    }
    Ok(1.0 - h_cond / h_true)
}

// ───────────────────────── paired bootstrap ─────────────────────────

/// Summary of a paired bootstrap over subjects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapSummary {
    /// Metric on the full sample.
    pub point: f64,
    /// Mean of the resample values.
    pub mean: f64,
    /// Sample standard deviation of the resample values (B−1 denominator).
    pub sd: f64,
    /// 2.5% percentile (order statistic of the resample values).
    pub ci_lo: f64,
    /// 97.5% percentile.
    pub ci_hi: f64,
    /// All resample values, in resample-index order.
    pub values: Vec<f64>,
}

/// Paired bootstrap of a label-pair metric: resamples subjects with
/// replacement, keeping `(true, pred)` pairs aligned. Each resample owns
/// a derived PRNG substream, so results do not depend on execution order
/// and resamples run in parallel under the `parallel` feature.
pub fn bootstrap_metric<F>(
    labels_true: &[usize],
    labels_pred: &[usize],
    metric: F,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapSummary>
where
    F: Fn(&[usize], &[usize]) -> Result<f64> + Sync + Send,
{
    if labels_true.len() != labels_pred.len() || labels_true.is_empty() {
        return Err(Error::Config("bootstrap needs aligned non-empty labels".into()));
    }
    if resamples == 0 {
        return Err(Error::Config("bootstrap needs at least one resample".into()));
    }
    let n = labels_true.len();
    let point = metric(labels_true, labels_pred)?;
    let results: Vec<Result<f64>> = par_map_indexed(resamples, |b| {
        let mut rng = StreamRng::substream(seed, "bootstrap", b as u64);
        let mut ra = Vec::with_capacity(n);
        let mut rb = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.below(n);
            ra.push(labels_true[i]);
            rb.push(labels_pred[i]);
        }
        metric(&ra, &rb)
    });
    let mut values = Vec::with_capacity(resamples);
    for r in results {
        values.push(r?);
    }
    let b = values.len() as f64;
    let mean = values.iter().sum::<f64>() / b;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = |q: f64| -> usize {
        let i = (q * b).ceil() as usize;
        i.saturating_sub(1).min(sorted.len() - 1)
    };
    Ok(BootstrapSummary {
        point,
        mean,
        sd,
        ci_lo: sorted[idx(0.025)],
        ci_hi: sorted[idx(0.975)],
        values,
    })
}

// ───────────────────────── Welch's t-test ─────────────────────────

/// Which tail(s) of the t distribution to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    TwoSided,
    /// H1: mean(a) > mean(b).
    Greater,
    /// H1: mean(a) < mean(b).
    Less,
}

/// Result of Welch's unequal-variance t-test.
#[derive(Debug, Clone)]
pub struct TTestResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    pub p: f64,
    /// True when both sample variances were zero; `p` is then 1.0 for
    /// equal means and 0.0 otherwise, by convention.
    pub degenerate: bool,
}

/// Two-sided Welch's t-test (the default reported everywhere).
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    welch_ttest_tailed(a, b, Tail::TwoSided)
}

/// Welch's t-test with an explicit alternative.
pub fn welch_ttest_tailed(a: &[f64], b: &[f64], tail: Tail) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Config(
            "welch_ttest needs at least two observations per group".into(),
        ));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let sa = va / na;
    let sb = vb / nb;
    if sa + sb == 0.0 {
        let equal = ma == mb;
        return Ok(TTestResult {
            t: 0.0,
            df: na + nb - 2.0,
            p: if equal { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = match tail {
        Tail::TwoSided => student_t_two_sided_p(t, df)?,
        Tail::Greater => student_t_one_sided_p(t, df)?,
        Tail::Less => student_t_one_sided_p(-t, df)?,
    };
    Ok(TTestResult {
        t,
        df,
        p,
        degenerate: false,
    })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided p-value `P(|T_df| >= |t|)` via the identity
/// `p = I_{df/(df+t²)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) {
        return Err(Error::numerical(format!("t-test degrees of freedom {df}")));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    reg_inc_beta(0.5 * df, 0.5, df / (df + t * t))
}

/// One-sided p-value `P(T_df >= t)`.
pub fn student_t_one_sided_p(t: f64, df: f64) -> Result<f64> {
    let two = student_t_two_sided_p(t, df)?;
    Ok(if t >= 0.0 { 0.5 * two } else { 1.0 - 0.5 * two })
}

// ───────────────────── special functions ─────────────────────

/// Natural log of the gamma function (Lanczos approximation, g = 7).
pub fn ln_gamma(z: f64) -> f64 {
    const COEF: [f64; 8] = [
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        // Reflection: Γ(z)Γ(1−z) = π / sin(πz)
        let pi = std::f64::consts::PI;
        return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut x = 0.999_999_999_999_809_93;
    for (i, c) in COEF.iter().enumerate() {
        x += c / (z + i as f64 + 1.0);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

/// Regularized incomplete beta function `I_x(a, b)`, evaluated with the
/// continued-fraction expansion (modified Lentz), tolerance 1e-10.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(Error::numerical(format!("incomplete beta domain: a={a}, b={b}")));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x >= 1.0 {
        return Ok(1.0);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges fastest for x below the split point;
    // otherwise use the symmetry I_x(a,b) = 1 − I_{1−x}(b,a).
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x)? / b)
    }
}

/// Continued fraction for the incomplete beta (modified Lentz's method).
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    const EPS: f64 = 1e-10;
    const FPMIN: f64 = 1e-300;
    const MAX_ITER: usize = 300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(Error::numerical(
        "incomplete beta continued fraction did not converge",
    ))
}

// ───────────────────── auxiliary statistics ─────────────────────

/// Kolmogorov–Smirnov statistic of a sample against Uniform(0, 1).
pub fn ks_statistic_uniform(values: &[f64]) -> f64 {
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let hi = (i as f64 + 1.0) / n - x;
        let lo = x - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// Median of a slice (mean of the central pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
