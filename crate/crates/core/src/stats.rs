//! Sample statistics: moments, Kolmogorov-Smirnov distances, histograms.

use crate::error::{Error, Result};

/// Sample mean and standard deviation (the latter with the `n - 1`
/// denominator; 0 for chains shorter than 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Exact two-sample Kolmogorov-Smirnov statistic via a sorted merge.
pub fn two_sample_ks(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("KS needs nonempty samples".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.total_cmp(q));
    ys.sort_by(|p, q| p.total_cmp(q));

    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut stat = 0.0f64;
    while i < xs.len() && j < ys.len() {
        let t = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= t {
            i += 1;
        }
        while j < ys.len() && ys[j] <= t {
            j += 1;
        }
        let d = (i as f64 / na - j as f64 / nb).abs();
        if d > stat {
            stat = d;
        }
    }
    Ok(stat)
}

/// One-sample Kolmogorov-Smirnov statistic against a CDF.
pub fn one_sample_ks(xs: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("KS needs a nonempty sample".into()));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|p, q| p.total_cmp(q));
    let n = sorted.len() as f64;
    let mut stat = 0.0f64;
    for (k, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        stat = stat.max((f - k as f64 / n).abs());
        stat = stat.max(((k + 1) as f64 / n - f).abs());
    }
    Ok(stat)
}

/// Histogram over `[lo, hi]` with equal-width bins.
///
/// Bins are half-open `[e_k, e_{k+1})` with the last bin closed; the first
/// and last edges are exactly `lo` and `hi`. Values outside `[lo, hi]` are
/// not counted.
pub fn histogram(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Result<(Vec<f64>, Vec<u64>)> {
    if bins < 2 {
        return Err(Error::InvalidArgument("need at least 2 bins".into()));
    }
    if !(lo < hi) {
        return Err(Error::InvalidArgument("histogram needs lo < hi".into()));
    }
    let mut edges: Vec<f64> = (0..=bins)
        .map(|k| lo + (hi - lo) * k as f64 / bins as f64)
        .collect();
    edges[0] = lo;
    edges[bins] = hi;
    let mut counts = vec![0u64; bins];
    let width = (hi - lo) / bins as f64;
    for &x in xs {
        if x < lo || x > hi {
            continue;
        }
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok((edges, counts))
}
