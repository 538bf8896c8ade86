//! Histogram overlap and rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 50;

/// Two normalized histograms on a shared binning and their intersection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub bins: usize,
    pub range_min: f64,
    pub range_max: f64,
    pub mass_a: Vec<f64>,
    pub mass_b: Vec<f64>,
    /// `100 · Σ_i min(mass_a[i], mass_b[i])`
    pub overlap_percent: f64,
}

impl OverlapReport {
    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let width = (self.range_max - self.range_min) / self.bins as f64;
        let left = self.range_min + bin as f64 * width;
        let right = if bin + 1 == self.bins {
            self.range_max
        } else {
            self.range_min + (bin + 1) as f64 * width
        };
        (left, right)
    }

    /// `bin_left,bin_right,mass_a,mass_b` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,mass_a,mass_b\n");
        for i in 0..self.bins {
            let (l, r) = self.edges(i);
            out.push_str(&format!("{l},{r},{},{}\n", self.mass_a[i], self.mass_b[i]));
        }
        out
    }
}

fn bin_counts(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = if hi > lo {
            (((v - lo) / (hi - lo)) * bins as f64).floor() as usize
        } else {
            0
        };
        counts[idx.min(bins - 1)] += 1;
    }
    counts
}

/// Histogram intersection of `a` and `b` over `bins` uniform bins spanning
/// the pooled range; the last bin is closed on the right.
pub fn histogram_overlap(a: &[f64], b: &[f64], bins: usize) -> Result<OverlapReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("overlap needs two non-empty samples".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("bins must be positive".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("overlap sample".into()));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let ca = bin_counts(a, lo, hi, bins);
    let cb = bin_counts(b, lo, hi, bins);
    let (na, nb) = (a.len() as u128, b.len() as u128);
    // Exact integer intersection: Σ min(ca/na, cb/nb) = Σ min(ca·nb, cb·na) / (na·nb).
    let shared: u128 = ca
        .iter()
        .zip(&cb)
        .map(|(&x, &y)| (x as u128 * nb).min(y as u128 * na))
        .sum();
    Ok(OverlapReport {
        bins,
        range_min: lo,
        range_max: hi,
        mass_a: ca.iter().map(|&c| c as f64 / na as f64).collect(),
        mass_b: cb.iter().map(|&c| c as f64 / nb as f64).collect(),
        overlap_percent: 100.0 * shared as f64 / (na * nb) as f64,
    })
}

/// Normalized histogram of one sample as `bin_left,bin_right,mass` CSV.
pub fn histogram_csv(values: &[f64], bins: usize) -> Result<String> {
    let report = histogram_overlap(values, values, bins)?;
    let mut out = String::from("bin_left,bin_right,mass\n");
    for i in 0..bins {
        let (l, r) = report.edges(i);
        out.push_str(&format!("{l},{r},{}\n", report.mass_a[i]));
    }
    Ok(out)
}

/// Ranks starting at 1; ties share their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Infinite values are ranked like any other value.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidConfig(
            "spearman needs two samples of equal length >= 2".into(),
        ));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("spearman sample".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}
