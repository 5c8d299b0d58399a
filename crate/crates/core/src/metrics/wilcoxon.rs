use crate::error::{Error, Result};

/// Largest sample handled by full sign-pattern enumeration.
pub const EXACT_MAX_N: usize = 12;
pub const MIN_N: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wilcoxon {
    /// Sum of ranks of the positive differences.
    pub w: f64,
    /// One-tailed p-value for `a > b`.
    pub p: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub exact: bool,
}

/// Ranks of `|d|` with ties sharing their average rank, doubled so they stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // average of ranks i+1..=j+1, doubled
        let r2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = r2;
        }
        i = j + 1;
    }
    ranks
}

/// Paired one-tailed signed-rank test of `a > b`.
pub fn wilcoxon_one_tailed(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::shape("wilcoxon", format!("{} vs {} samples", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wilcoxon input".into()));
    }
    if d.is_empty() {
        return Err(Error::UndefinedTest("all paired differences are zero".into()));
    }
    if d.len() < MIN_N {
        return Err(Error::UndefinedTest(format!(
            "{} non-zero differences, at least {MIN_N} needed",
            d.len()
        )));
    }
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let r2 = doubled_ranks(&abs);
    let w2: u64 = d.iter().zip(&r2).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w = w2 as f64 / 2.0;
    if n <= EXACT_MAX_N {
        let mut hits = 0u64;
        for pattern in 0u32..(1 << n) {
            let s: u64 = (0..n).filter(|k| pattern >> k & 1 == 1).map(|k| r2[k]).sum();
            hits += (s >= w2) as u64;
        }
        return Ok(Wilcoxon {
            w,
            p: hits as f64 / (1u64 << n) as f64,
            n,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = r2.clone();
    sorted.sort_unstable();
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        ties += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = (w - mean - 0.5) / var.sqrt();
    Ok(Wilcoxon {
        w,
        p: 0.5 * libm::erfc(z / std::f64::consts::SQRT_2),
        n,
        exact: false,
    })
}

/// Null distribution of the statistic for untied ranks `1..=n`: `pmf[w]`.
pub fn signed_rank_distribution(n: usize) -> Vec<f64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let total = (1u64 << n) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}
