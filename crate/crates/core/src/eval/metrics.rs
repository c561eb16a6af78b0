//! Security/functionality metrics and the significance test.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("need 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")]
    Domain { n: u64, c: u64, k: u64 },
    #[error("no samples in scope")]
    Empty,
    #[error("contingency table has no observations")]
    EmptyTable,
}

/// Count of passing samples out of a total, rendered as `6,496/9,300 (69.8)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub passed: u64,
    pub total: u64,
}

impl Ratio {
    pub fn new(passed: u64, total: u64) -> Self {
        Self { passed, total }
    }

    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.passed as f64 / self.total as f64)
    }

    pub fn add(&mut self, other: Ratio) {
        self.passed += other.passed;
        self.total += other.total;
    }

    /// Percentage to one decimal, `-` when empty.
    pub fn percent(&self) -> String {
        if self.total == 0 {
            "-".into()
        } else {
            percent_half_up(self.passed, self.total)
        }
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{} ({})", thousands(self.passed), thousands(self.total), self.percent())
    }
}

/// Fraction of secure samples over the samples in scope.
pub fn secure_ratio(secure: u64, total: u64) -> Result<f64, MetricError> {
    Ratio::new(secure, total).value().ok_or(MetricError::Empty)
}

/// `100 * num / den` rounded half-up to one decimal, using integer
/// arithmetic so `.x5` boundaries are exact.
pub fn percent_half_up(num: u64, den: u64) -> String {
    assert!(den > 0, "denominator must be positive");
    let tenths = (2000 * num as u128 + den as u128) / (2 * den as u128);
    format!("{}.{}", tenths / 10, tenths % 10)
}

/// Value in [0, 1] as a one-decimal percentage, rounded half-up.
pub fn format_percent(x: f64) -> String {
    let tenths = (x * 1000.0 + 0.5).floor() as u64;
    format!("{}.{}", tenths / 10, tenths % 10)
}

/// `9300` -> `9,300`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Unbiased estimate that at least one of `k` draws from `n` samples (of
/// which `c` pass) passes: `1 - C(n-c, k) / C(n, k)`, as a running product.
pub fn metric_at_k(n: u64, c: u64, k: u64) -> Result<f64, MetricError> {
    if c > n || k == 0 || k > n {
        return Err(MetricError::Domain { n, c, k });
    }
    if k == 1 {
        return Ok(c as f64 / n as f64);
    }
    if n - c < k {
        return Ok(1.0);
    }
    // C(n-c, k) / C(n, k) = prod_{i=0}^{k-1} (n-c-i) / (n-i)
    let mut miss = 1.0;
    for i in 0..k {
        miss *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - miss)
}

/// Relative tolerance when comparing table probabilities to the observed one.
pub const FISHER_TIE_TOLERANCE: f64 = 1e-12;

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut t = Vec::with_capacity(n as usize + 1);
    t.push(0.0);
    let mut acc = 0.0;
    for i in 1..=n {
        acc += (i as f64).ln();
        t.push(acc);
    }
    t
}

/// Two-sided Fisher exact test on `[[a, b], [c, d]]`: the total probability
/// of tables with the same margins that are no more likely than the
/// observed one.
pub fn fisher_exact(table: [[u64; 2]; 2]) -> Result<f64, MetricError> {
    let [[a, b], [c, d]] = table;
    let n = a + b + c + d;
    if n == 0 {
        return Err(MetricError::EmptyTable);
    }
    let (row1, row2, col1) = (a + b, c + d, a + c);
    let lf = ln_factorials(n);
    let ln_choose = |m: u64, r: u64| lf[m as usize] - lf[r as usize] - lf[(m - r) as usize];
    let denom = ln_choose(n, col1);
    let ln_p = |x: u64| ln_choose(row1, x) + ln_choose(row2, col1 - x) - denom;
    let lo = col1.saturating_sub(row2);
    let hi = row1.min(col1);
    let observed = ln_p(a);
    let cutoff = observed + FISHER_TIE_TOLERANCE.ln_1p();
    let p: f64 = (lo..=hi).map(ln_p).filter(|&lp| lp <= cutoff).map(f64::exp).sum();
    Ok(p.min(1.0))
}
