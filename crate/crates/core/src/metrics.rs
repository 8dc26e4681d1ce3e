//! AUROC and nonparametric statistics.
//!
//! AUROC uses the Mann–Whitney formulation (ties count one half) computed
//! through average ranks. The hypothesis tests report normal / chi-square
//! approximation p-values; the signed-rank test adds an Edgeworth kurtosis
//! term so small-sample p-values stay close to the exact distribution.
//! Exact enumeration exists only as a test oracle.

use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least one OOD and one ID sample")]
    SingleClass,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least {min} observations, got {got}")]
    TooFew { min: usize, got: usize },
    #[error("constant input: rank correlation undefined")]
    ConstantInput,
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("p-value {0} outside [0, 1]")]
    PValueRange(f64),
}

/// One scored test sample; `is_ood` marks the positive class.
#[derive(Debug, Clone, Copy)]
pub struct ScoredSample {
    pub score: f64,
    pub is_ood: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestMethod {
    Spearman,
    WilcoxonSignedRank,
    KruskalWallis,
    MannWhitneyU,
}

impl TestMethod {
    pub fn name(&self) -> &'static str {
        match self {
            TestMethod::Spearman => "spearman",
            TestMethod::WilcoxonSignedRank => "wilcoxon_signed_rank",
            TestMethod::KruskalWallis => "kruskal_wallis",
            TestMethod::MannWhitneyU => "mann_whitney_u",
        }
    }
}

/// Statistic (ρ, W, H or U) and two-sided p-value.
#[derive(Debug, Clone)]
pub struct TestResult {
    pub method: TestMethod,
    pub statistic: f64,
    pub p_value: f64,
}

/// Average (mid) ranks, 1-based, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Σ (t³ − t) over tie groups of the given values.
fn tie_term(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut total = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        total += t * t * t - t;
        i = j + 1;
    }
    total
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

pub(crate) fn chi_square_sf(x: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64).expect("valid dof").sf(x)
}

/// AUROC with OOD as the positive class: P(score_ood > score_id) + ½ ties.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64, MetricError> {
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let n_ood = samples.iter().filter(|s| s.is_ood).count();
    let n_id = samples.len() - n_ood;
    if n_ood == 0 || n_id == 0 {
        return Err(MetricError::SingleClass);
    }
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let ranks = average_ranks(&scores);
    let rank_sum: f64 = samples
        .iter()
        .zip(&ranks)
        .filter(|(s, _)| s.is_ood)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum - (n_ood * (n_ood + 1)) as f64 / 2.0;
    Ok(u / (n_ood as f64 * n_id as f64))
}

/// Spearman rank correlation with a two-sided t-approximation p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<TestResult, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch { a: x.len(), b: y.len() });
    }
    if x.len() < 3 {
        return Err(MetricError::TooFew { min: 3, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(MetricError::ConstantInput);
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = rx[i] - mean;
        let dy = ry[i] - mean;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, n - 2.0).expect("valid dof");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(TestResult { method: TestMethod::Spearman, statistic: rho, p_value: p })
}

/// Paired Wilcoxon signed-rank test. Zero differences are dropped; all-zero
/// input reports W = 0, p = 1. Two-sided p from a continuity-corrected
/// normal with tie-corrected variance and an Edgeworth kurtosis term.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<TestResult, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Ok(TestResult {
            method: TestMethod::WilcoxonSignedRank,
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, &r)| r).sum();
    let w_minus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, &r)| r).sum();
    let w = w_plus.min(w_minus);

    let n = diffs.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // With average ranks, Var(W⁺) = Σ rᵢ²/4 and κ₄ = −Σ rᵢ⁴/8 under H0,
    // which embody the usual tie corrections.
    let var: f64 = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
    if var <= 0.0 {
        return Ok(TestResult {
            method: TestMethod::WilcoxonSignedRank,
            statistic: w,
            p_value: 1.0,
        });
    }
    let kurt = -ranks.iter().map(|r| r.powi(4)).sum::<f64>() / 8.0 / (var * var);
    let mut num = w - mean;
    if num < 0.0 {
        num += 0.5;
    }
    let z = (num / var.sqrt()).min(0.0);
    let normal = std_normal();
    let lower = (normal.cdf(z) - normal.pdf(z) * (kurt / 24.0) * (z * z * z - 3.0 * z))
        .clamp(0.0, 1.0);
    let p = (2.0 * lower).min(1.0);
    Ok(TestResult { method: TestMethod::WilcoxonSignedRank, statistic: w, p_value: p })
}

/// Kruskal–Wallis rank test with tie correction; p from the chi-square
/// survival function with k−1 degrees of freedom.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult, MetricError> {
    if groups.len() < 2 {
        return Err(MetricError::TooFew { min: 2, got: groups.len() });
    }
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(MetricError::EmptyGroup(i));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite);
        }
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let ranks = average_ranks(&pooled);
    let mut h = 0.0;
    let mut offset = 0;
    for g in groups {
        let ni = g.len() as f64;
        let sum: f64 = ranks[offset..offset + g.len()].iter().sum();
        h += sum * sum / ni;
        offset += g.len();
    }
    h = 12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0);
    let correction = 1.0 - tie_term(&pooled) / (n * n * n - n);
    if correction <= 0.0 {
        // every pooled value identical
        return Ok(TestResult { method: TestMethod::KruskalWallis, statistic: 0.0, p_value: 1.0 });
    }
    let h = (h / correction).max(0.0);
    let p = chi_square_sf(h, groups.len() - 1);
    Ok(TestResult { method: TestMethod::KruskalWallis, statistic: h, p_value: p })
}

/// Mann–Whitney U for sample `a` (pairs with a > b count 1, ties ½), with a
/// continuity-corrected, tie-corrected normal p-value.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let ra: f64 = ranks[..a.len()].iter().sum();
    let u = ra - na * (na + 1.0) / 2.0;

    let total = na + nb;
    let mean = na * nb / 2.0;
    let tie = tie_term(&pooled);
    let var = na * nb / 12.0 * ((total + 1.0) - tie / (total * (total - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let mut num = u - mean;
        if num < 0.0 {
            num += 0.5;
        } else if num > 0.0 {
            num -= 0.5;
        }
        let z = num / var.sqrt();
        (2.0 * std_normal().sf(z.abs())).min(1.0)
    };
    Ok(TestResult { method: TestMethod::MannWhitneyU, statistic: u, p_value: p })
}

/// Step-down Holm adjustment with monotonicity enforcement, clipped at 1.
/// Output order matches input order.
pub fn holm_correction(p_values: &[f64]) -> Result<Vec<f64>, MetricError> {
    for &p in p_values {
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricError::PValueRange(p));
        }
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].partial_cmp(&p_values[j]).unwrap());
    let mut adjusted = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        let scaled = (m - rank) as f64 * p_values[idx];
        running = running.max(scaled).min(1.0);
        adjusted[idx] = running;
    }
    Ok(adjusted)
}

/// Linear-interpolation quantile of a sorted slice; `p` in percent.
/// Rank h = (n−1)·p/100, value a⌊h⌋ + frac·(a⌊h⌋₊₁ − a⌊h⌋).
pub fn linear_quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=100.0).contains(&p), "percentile out of range");
    let n = sorted.len();
    let h = (n - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 || lo + 1 >= n {
        sorted[lo.min(n - 1)]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Median and interquartile range with linear-interpolation quartiles.
pub fn median_iqr(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = linear_quantile(&sorted, 50.0);
    let iqr = linear_quantile(&sorted, 75.0) - linear_quantile(&sorted, 25.0);
    (median, iqr)
}
