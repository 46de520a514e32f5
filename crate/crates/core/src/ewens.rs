//! Ewens sampling formula with θ = 2γ.

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Largest `n` for which the full distribution is enumerated.
pub const MAX_ENUMERATED_N: usize = 30;

/// `a[i-1]` = number of allelic families with exactly `i` representatives.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct AlleleConfiguration(pub Vec<u32>);

impl AlleleConfiguration {
    pub fn new(a: Vec<u32>) -> Self {
        AlleleConfiguration(a)
    }

    /// Configuration of a partition given by its block sizes.
    pub fn from_block_sizes(n: usize, sizes: impl IntoIterator<Item = usize>) -> Self {
        let mut a = vec![0u32; n];
        for s in sizes {
            a[s - 1] += 1;
        }
        AlleleConfiguration(a)
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    /// Σ i·a_i
    pub fn total(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .map(|(i, &a)| (i as u64 + 1) * a as u64)
            .sum()
    }

    /// Σ a_i
    pub fn families(&self) -> u32 {
        self.0.iter().sum()
    }
}

impl std::fmt::Display for AlleleConfiguration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

fn check_gamma(gamma: f64) -> Result<f64> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(2.0 * gamma)
    } else {
        Err(Error::BadGamma(gamma))
    }
}

/// ln θ^{(n)} = ln θ(θ+1)⋯(θ+n−1)
fn ln_rising(theta: f64, n: usize) -> f64 {
    if n <= DIRECT_SUM_LIMIT {
        (0..n).map(|i| (theta + i as f64).ln()).sum()
    } else {
        ln_gamma(theta + n as f64) - ln_gamma(theta)
    }
}

/// Below this many factors, log-products are summed term by term, which is
/// more accurate than differencing ln Γ.
const DIRECT_SUM_LIMIT: usize = 4096;

fn ln_factorial(n: usize) -> f64 {
    ln_rising(1.0, n)
}

pub fn ewens_pmf(n: usize, gamma: f64, a: &AlleleConfiguration) -> Result<f64> {
    let theta = check_gamma(gamma)?;
    if n < 1 || a.total() != n as u64 {
        return Err(Error::BadConfiguration(format!(
            "Σ i·a_i = {} but n = {n}",
            a.total()
        )));
    }
    let mut log_p = ln_factorial(n) - ln_rising(theta, n);
    for (i, &ai) in a.counts().iter().enumerate() {
        if ai > 0 {
            log_p += ai as f64 * (theta.ln() - ((i + 1) as f64).ln()) - ln_factorial(ai as usize);
        }
    }
    Ok(log_p.exp())
}

/// All configurations of `n`, in lexicographic order of the `a` vector.
pub fn configurations(n: usize) -> Vec<AlleleConfiguration> {
    fn rec(rest: usize, max_part: usize, a: &mut Vec<u32>, out: &mut Vec<AlleleConfiguration>) {
        if rest == 0 {
            out.push(AlleleConfiguration(a.clone()));
            return;
        }
        for part in (1..=max_part.min(rest)).rev() {
            a[part - 1] += 1;
            rec(rest - part, part, a, out);
            a[part - 1] -= 1;
        }
    }
    let mut out = Vec::new();
    let mut a = vec![0u32; n];
    rec(n, n, &mut a, &mut out);
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EwensDistribution {
    pub n: usize,
    pub gamma: f64,
    pub pmf: Vec<(AlleleConfiguration, f64)>,
    /// `k_marginal[k-1]` = P(K = k).
    pub k_marginal: Vec<f64>,
}

impl EwensDistribution {
    pub fn probability(&self, a: &AlleleConfiguration) -> f64 {
        self.pmf
            .binary_search_by(|(c, _)| c.cmp(a))
            .map_or(0.0, |i| self.pmf[i].1)
    }
}

pub fn ewens_distribution(n: usize, gamma: f64) -> Result<EwensDistribution> {
    check_gamma(gamma)?;
    if n > MAX_ENUMERATED_N {
        return Err(Error::TooLarge(n));
    }
    if n < 1 {
        return Err(Error::BadConfiguration("n must be >= 1".into()));
    }
    let mut k_marginal = vec![0.0; n];
    let mut pmf = Vec::new();
    for a in configurations(n) {
        let p = ewens_pmf(n, gamma, &a)?;
        k_marginal[a.families() as usize - 1] += p;
        pmf.push((a, p));
    }
    Ok(EwensDistribution {
        n,
        gamma,
        pmf,
        k_marginal,
    })
}

/// Unsigned Stirling numbers of the first kind `|s(n, k)|`, k = 0..=n.
pub fn stirling_first_unsigned(n: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for m in 0..n {
        let mut next = vec![0.0; row.len() + 1];
        for (k, &c) in row.iter().enumerate() {
            next[k] += m as f64 * c;
            next[k + 1] += c;
        }
        row = next;
    }
    row
}

/// P(K = k) = |s(n,k)| θ^k / θ^{(n)}, k = 1..=n.
pub fn k_marginal_stirling(n: usize, gamma: f64) -> Result<Vec<f64>> {
    let theta = check_gamma(gamma)?;
    let s = stirling_first_unsigned(n);
    let log_norm = ln_rising(theta, n);
    Ok((1..=n)
        .map(|k| (s[k].ln() + k as f64 * theta.ln() - log_norm).exp())
        .collect())
}

/// CSV with sections `configuration,probability` and `k,probability`.
pub fn distribution_csv(d: &EwensDistribution) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("configuration,probability\n");
    for (a, p) in &d.pmf {
        let _ = writeln!(out, "\"{a}\",{p}");
    }
    out.push_str("\nk,probability\n");
    for (k, p) in d.k_marginal.iter().enumerate() {
        let _ = writeln!(out, "{},{p}", k + 1);
    }
    out
}
