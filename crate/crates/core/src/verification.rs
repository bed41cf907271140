//! Forecast scores and distribution comparisons.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::density::JointKde;
use crate::error::{check_dim, Error, Result};

/// CRPS of an ensemble against a scalar observation, closed form for the
/// empirical CDF: `mean|x_i - y| - 1/(2n^2) sum_ij |x_i - x_j|`.
pub fn crps(ensemble: &[f64], y: f64) -> f64 {
    let n = ensemble.len();
    assert!(n > 0, "crps needs at least one member");
    let mut sorted = ensemble.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let abs_err = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / nf;
    // sum_ij |x_i - x_j| = 2 sum_i (2i - n - 1) x_(i), i = 1..n
    let spread: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i + 1) as f64 - nf - 1.0) * x)
        .sum();
    (abs_err - spread / (nf * nf)).max(0.0)
}

pub const DEFAULT_LOG_SCORE_CAP: f64 = 30.0;

/// `-ln p(y)` for a Gaussian KDE of the ensemble with bandwidth
/// `1.06 sd n^{-1/5}`, capped at `cap`.
pub fn log_score(ensemble: &[f64], y: f64, cap: f64) -> f64 {
    let n = ensemble.len();
    assert!(n >= 2, "log score needs at least two members");
    let nf = n as f64;
    let mean = ensemble.iter().sum::<f64>() / nf;
    let sd = (ensemble.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let h = (1.06 * sd * nf.powf(-0.2)).max(1e-12 * y.abs().max(1.0));
    let logs: Vec<f64> = ensemble.iter().map(|x| -0.5 * ((y - x) / h).powi(2)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let ln_p = lse - nf.ln() - h.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let score = -ln_p;
    if score.is_finite() {
        score.min(cap)
    } else {
        cap
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KldGrid {
    pub points_per_dim: usize,
    pub lower_percentile: f64,
    pub upper_percentile: f64,
    pub epsilon: f64,
}

impl Default for KldGrid {
    fn default() -> Self {
        Self {
            points_per_dim: 60,
            lower_percentile: 0.5,
            upper_percentile: 99.5,
            epsilon: 1e-12,
        }
    }
}

fn percentile(sorted: &[f64], pct: f64) -> f64 {
    crate::density::quantile_sorted(sorted, pct / 100.0)
}

/// `KL(p || q)` between KDEs of two sample sets (row-major, `dim` values per
/// sample) on a regular grid over the union percentile envelope.
pub fn kld(samples_p: &[f64], samples_q: &[f64], dim: usize, grid: &KldGrid) -> Result<f64> {
    if !(1..=3).contains(&dim) {
        return Err(Error::Config(format!("KLD supports 1 to 3 dimensions, got {dim}")));
    }
    if samples_p.is_empty() || samples_q.is_empty() {
        return Err(Error::Config("KLD needs non-empty sample sets".into()));
    }
    check_dim("KLD p samples", 0, samples_p.len() % dim)?;
    check_dim("KLD q samples", 0, samples_q.len() % dim)?;
    let kp = JointKde::fit(samples_p, dim)?;
    let kq = JointKde::fit(samples_q, dim)?;
    let g = grid.points_per_dim;
    let mut lo = vec![0.0; dim];
    let mut step = vec![0.0; dim];
    for j in 0..dim {
        let col = |s: &[f64]| {
            let mut v: Vec<f64> = s.iter().skip(j).step_by(dim).copied().collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (a, b) = (col(samples_p), col(samples_q));
        let l = percentile(&a, grid.lower_percentile).min(percentile(&b, grid.lower_percentile));
        let u = percentile(&a, grid.upper_percentile).max(percentile(&b, grid.upper_percentile));
        let u = if u > l { u } else { l + 1e-9 * l.abs().max(1.0) };
        lo[j] = l;
        step[j] = (u - l) / g as f64;
    }
    let cell: f64 = step.iter().product();
    let total = g.pow(dim as u32);
    let mut x = vec![0.0; dim];
    let mut sum = 0.0;
    for c in 0..total {
        let mut rem = c;
        for j in (0..dim).rev() {
            x[j] = lo[j] + (rem % g) as f64 * step[j] + 0.5 * step[j];
            rem /= g;
        }
        let p = kp.pdf(&x);
        if p > grid.epsilon {
            let q = kq.pdf(&x).max(grid.epsilon);
            sum += p * (p / q).ln() * cell;
        }
    }
    Ok(sum)
}

/// `(score - benchmark) / (perfect - benchmark)`; `None` when the benchmark
/// already equals the perfect score.
pub fn skill_score(score: f64, benchmark: f64, perfect: f64) -> Option<f64> {
    let den = perfect - benchmark;
    if den == 0.0 || !den.is_finite() {
        return None;
    }
    Some((score - benchmark) / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadErrorBin {
    pub bin: usize,
    pub rms_spread: f64,
    pub rms_error: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpreadErrorDiagnostic {
    pub bins: Vec<SpreadErrorBin>,
}

impl SpreadErrorDiagnostic {
    /// `max |rms_error - rms_spread| / rms_spread` over bins.
    pub fn max_relative_mismatch(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| (b.rms_error - b.rms_spread).abs() / b.rms_spread)
            .fold(0.0, f64::max)
    }
}

/// Sorts records by forecast variance and splits them into `n_bins`
/// equal-count bins.
pub fn spread_error_bins(variances: &[f64], squared_errors: &[f64], n_bins: usize) -> Result<SpreadErrorDiagnostic> {
    check_dim("squared errors", variances.len(), squared_errors.len())?;
    let n = variances.len();
    if n_bins == 0 || n < n_bins {
        return Err(Error::Config(format!("spread-error needs at least {n_bins} records, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| variances[a].total_cmp(&variances[b]));
    let bins = (0..n_bins)
        .map(|b| {
            let idx = &order[b * n / n_bins..(b + 1) * n / n_bins];
            let m = idx.len() as f64;
            SpreadErrorBin {
                bin: b + 1,
                rms_spread: (idx.iter().map(|&i| variances[i]).sum::<f64>() / m).sqrt(),
                rms_error: (idx.iter().map(|&i| squared_errors[i]).sum::<f64>() / m).sqrt(),
                count: idx.len(),
            }
        })
        .collect();
    Ok(SpreadErrorDiagnostic { bins })
}

/// Biased-normalization cross-correlation of `a[t]` with `b[t + lag]`.
fn cross_correlation(a: &[f64], b: &[f64], max_lag: usize) -> Vec<f64> {
    let n = a.len();
    let nf = n as f64;
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / nf).sqrt();
    let sb = (b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / nf).sqrt();
    (0..=max_lag.min(n - 1))
        .map(|lag| {
            let s: f64 = (0..n - lag).map(|t| (a[t] - ma) * (b[t + lag] - mb)).sum();
            s / nf / (sa * sb)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub lag_mtu: f64,
    pub acf: f64,
    pub ccf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub x: f64,
    pub pdf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    /// ACF of `X_k` and CCF of `X_k` with `X_{k+1}`, averaged over `k`.
    pub correlations: Vec<CorrelationRow>,
    pub marginal: Vec<DensityRow>,
}

/// Climatological statistics of a slow-variable trajectory sampled every
/// `interval_mtu`.
pub fn climatology(series: &[DVector<f64>], interval_mtu: f64, max_lag: usize, n_pdf_points: usize) -> Result<Climatology> {
    if series.len() < 1000 {
        return Err(Error::Config(format!("climatology needs at least 1000 states, got {}", series.len())));
    }
    let n_x = series[0].len();
    let comp = |k: usize| -> Vec<f64> { series.iter().map(|s| s[k]).collect() };
    let cols: Vec<Vec<f64>> = (0..n_x).map(comp).collect();
    let mut acf = vec![0.0; max_lag + 1];
    let mut ccf = vec![0.0; max_lag + 1];
    for k in 0..n_x {
        for (a, v) in acf.iter_mut().zip(cross_correlation(&cols[k], &cols[k], max_lag)) {
            *a += v / n_x as f64;
        }
        for (c, v) in ccf.iter_mut().zip(cross_correlation(&cols[k], &cols[(k + 1) % n_x], max_lag)) {
            *c += v / n_x as f64;
        }
    }
    let correlations = (0..=max_lag.min(series.len() - 1))
        .map(|lag| CorrelationRow {
            lag_mtu: lag as f64 * interval_mtu,
            acf: acf[lag],
            ccf: ccf[lag],
        })
        .collect();
    let pooled: Vec<f64> = cols.concat();
    let marginal = marginal_density(&pooled, n_pdf_points)?;
    Ok(Climatology {
        correlations,
        marginal,
    })
}

/// 1-D KDE on an even grid spanning the data plus three bandwidths.
pub fn marginal_density(values: &[f64], n_points: usize) -> Result<Vec<DensityRow>> {
    let kde = JointKde::fit(values, 1)?;
    let h = kde.bandwidths()[0];
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let n = n_points.max(2);
    Ok((0..n)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            DensityRow { x, pdf: kde.pdf(&[x]) }
        })
        .collect())
}

/// RMSE over time and variables.
pub fn rmse(means: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    check_dim("rmse series", truth.len(), means.len())?;
    if means.is_empty() {
        return Err(Error::Config("rmse of an empty series".into()));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (m, t) in means.iter().zip(truth) {
        check_dim("rmse state", t.len(), m.len())?;
        sum += (m - t).norm_squared();
        count += t.len();
    }
    Ok((sum / count as f64).sqrt())
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// One scored forecast: run, lead time and grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub run_id: usize,
    pub lead_mtu: f64,
    pub variable_k: usize,
    pub crps: f64,
    pub log_score: f64,
    pub rmse: f64,
}
