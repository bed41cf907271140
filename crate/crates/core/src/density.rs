//! Kernel estimates of the error distribution conditioned on the previous
//! state, and the stochastic error sampler built on them.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::estimation::ErrorTrainingSet;
use crate::etkf::ErrorSampler;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Kernel terms below `exp(-CUTOFF)` relative to the largest are dropped.
const CUTOFF: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    /// `x_{j-1}[k]`
    XPrevK,
    /// `x_{j-1}[k-1]`
    XPrevKm1,
    /// `eta_{j-1}[k]`
    EtaPrevK,
}

impl Covariate {
    pub fn name(self) -> &'static str {
        match self {
            Self::XPrevK => "x_prev_k",
            Self::XPrevKm1 => "x_prev_km1",
            Self::EtaPrevK => "eta_prev_k",
        }
    }

    fn value(self, k: usize, state_prev: &[f64], eta_prev: &[f64]) -> f64 {
        let n = state_prev.len();
        match self {
            Self::XPrevK => state_prev[k],
            Self::XPrevKm1 => state_prev[(k + n - 1) % n],
            Self::EtaPrevK => eta_prev[k],
        }
    }
}

/// Paired responses and covariates, covariates stored row-major `m x d`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensitySamples {
    pub responses: Vec<f64>,
    pub covariates: Vec<f64>,
    pub d: usize,
}

impl DensitySamples {
    pub fn new(responses: Vec<f64>, covariates: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("at least one covariate is required".into()));
        }
        check_dim("covariate samples", responses.len() * d, covariates.len())?;
        Ok(Self {
            responses,
            covariates,
            d,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn covariate(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.d..(i + 1) * self.d]
    }

    /// Joint points `(response, covariates...)`, row-major `m x (d+1)`.
    pub fn joint_points(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * (self.d + 1));
        for i in 0..self.len() {
            out.push(self.responses[i]);
            out.extend_from_slice(self.covariate(i));
        }
        out
    }
}

/// Keeps every `interval / obs_interval`-th non-tail record and emits one
/// sample per grid point. Records whose predecessor is missing are skipped
/// when `eta_prev_k` is requested.
pub fn thin_decorrelated(
    set: &ErrorTrainingSet,
    interval_mtu: f64,
    obs_interval_mtu: f64,
    covariates: &[Covariate],
) -> Result<DensitySamples> {
    if !(interval_mtu > 0.0 && obs_interval_mtu > 0.0) {
        return Err(Error::Config("thinning intervals must be positive".into()));
    }
    let ratio = interval_mtu / obs_interval_mtu;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-6 * stride {
        return Err(Error::Config(format!(
            "thinning interval {interval_mtu} is not a multiple of the observation interval {obs_interval_mtu}"
        )));
    }
    let stride = stride as usize;
    let needs_prev = covariates.contains(&Covariate::EtaPrevK);
    let zeros = vec![0.0; set.n_x];
    let mut responses = Vec::new();
    let mut cov = Vec::new();
    for (j, rec) in set.records.iter().enumerate() {
        if rec.tail || j % stride != 0 {
            continue;
        }
        let prev = j
            .checked_sub(1)
            .map(|p| &set.records[p])
            .filter(|p| p.time_index + 1 == rec.time_index);
        if needs_prev && prev.is_none() {
            continue;
        }
        let eta_prev = prev.map_or(&zeros[..], |p| &p.eta[..]);
        for k in 0..set.n_x {
            responses.push(rec.eta[k]);
            for c in covariates {
                cov.push(c.value(k, &rec.state_prev, eta_prev));
            }
        }
    }
    DensitySamples::new(responses, cov, covariates.len())
}

/// Linearly interpolated empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Drops samples with any covariate outside its `[q, 1-q]` empirical range.
pub fn remove_covariate_outliers(samples: &DensitySamples, quantile: f64) -> Result<DensitySamples> {
    if !(0.0..0.5).contains(&quantile) {
        return Err(Error::Config(format!("outlier quantile must be in [0, 0.5), got {quantile}")));
    }
    if samples.is_empty() {
        return Ok(samples.clone());
    }
    let d = samples.d;
    let bounds: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            let mut col: Vec<f64> = (0..samples.len()).map(|i| samples.covariates[i * d + j]).collect();
            col.sort_by(f64::total_cmp);
            (quantile_sorted(&col, quantile), quantile_sorted(&col, 1.0 - quantile))
        })
        .collect();
    let mut responses = Vec::new();
    let mut cov = Vec::new();
    for i in 0..samples.len() {
        let c = samples.covariate(i);
        if c.iter().zip(&bounds).all(|(v, (lo, hi))| v >= lo && v <= hi) {
            responses.push(samples.responses[i]);
            cov.extend_from_slice(c);
        }
    }
    DensitySamples::new(responses, cov, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    NormalReference,
    /// Least-squares cross-validation of a common scale on the
    /// normal-reference bandwidths.
    CrossValidation,
}

fn std_dev(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Normal-reference bandwidths for `m` points of dimension `q`
/// (row-major).
pub fn normal_reference_bandwidths(points: &[f64], q: usize) -> Result<Vec<f64>> {
    let m = points.len() / q;
    if m < 2 {
        return Err(Error::Config("bandwidth selection needs at least two samples".into()));
    }
    let factor = (4.0 / ((q as f64 + 2.0) * m as f64)).powf(1.0 / (q as f64 + 4.0));
    (0..q)
        .map(|j| {
            let s = std_dev((0..m).map(|i| points[i * q + j]));
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sample dimension {j} has zero variance")));
            }
            Ok(s * factor)
        })
        .collect()
}

/// LSCV score of a product-Gaussian KDE with bandwidths `h`.
fn lscv_score(points: &[f64], q: usize, h: &[f64]) -> f64 {
    let m = points.len() / q;
    let norm = |scale: f64| -> f64 { h.iter().map(|hj| -(hj * scale).ln() - LN_SQRT_2PI).sum() };
    let (ln_c2, ln_c1) = (norm(std::f64::consts::SQRT_2), norm(1.0));
    let mut conv = 0.0;
    let mut loo = 0.0;
    for i in 0..m {
        for k in 0..m {
            let u2: f64 = (0..q).map(|j| ((points[i * q + j] - points[k * q + j]) / h[j]).powi(2)).sum();
            conv += (ln_c2 - 0.25 * u2).exp();
            if i != k {
                loo += (ln_c1 - 0.5 * u2).exp();
            }
        }
    }
    let m = m as f64;
    conv / (m * m) - 2.0 * loo / (m * (m - 1.0))
}

/// Scale in `0.25..=2` minimizing LSCV on up to 1500 evenly spread points.
fn cross_validated_scale(points: &[f64], q: usize, base: &[f64]) -> f64 {
    let m = points.len() / q;
    let stride = m.div_ceil(1500).max(1);
    let sub: Vec<f64> = (0..m).step_by(stride).flat_map(|i| points[i * q..(i + 1) * q].to_vec()).collect();
    let mut best = (f64::INFINITY, 1.0);
    for s in (0..=28).map(|i| 0.25 * 1.08f64.powi(i)) {
        let h: Vec<f64> = base.iter().map(|b| b * s).collect();
        let score = lscv_score(&sub, q, &h);
        if score < best.0 {
            best = (score, s);
        }
    }
    best.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KdeFile {
    responses: Vec<f64>,
    covariates: Vec<Vec<f64>>,
    bandwidths: Vec<f64>,
    rule: BandwidthRule,
    #[serde(default)]
    covariate_set: Vec<Covariate>,
}

/// Product-Gaussian conditional density `p(eta | c)` in Nadaraya-Watson
/// form.
#[derive(Debug, Clone)]
pub struct ConditionalKde {
    samples: DensitySamples,
    h_response: f64,
    h_cov: Vec<f64>,
    rule: BandwidthRule,
    covariate_set: Vec<Covariate>,
    /// Sample indices sorted by the first covariate, and those values.
    order: Vec<usize>,
    first: Vec<f64>,
}

impl ConditionalKde {
    pub fn fit(samples: DensitySamples, rule: BandwidthRule) -> Result<Self> {
        if samples.len() < 10 {
            return Err(Error::Config(format!(
                "conditional density needs at least 10 samples, got {}",
                samples.len()
            )));
        }
        let q = samples.d + 1;
        let points = samples.joint_points();
        let mut h = normal_reference_bandwidths(&points, q)?;
        if rule == BandwidthRule::CrossValidation {
            let s = cross_validated_scale(&points, q, &h);
            h.iter_mut().for_each(|v| *v *= s);
        }
        Self::with_bandwidths(samples, h[0], h[1..].to_vec(), rule)
    }

    pub fn with_bandwidths(samples: DensitySamples, h_response: f64, h_cov: Vec<f64>, rule: BandwidthRule) -> Result<Self> {
        check_dim("covariate bandwidths", samples.d, h_cov.len())?;
        if samples.is_empty() {
            return Err(Error::Config("conditional density needs samples".into()));
        }
        if std::iter::once(&h_response).chain(&h_cov).any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::Config("bandwidths must be positive and finite".into()));
        }
        let d = samples.d;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by(|&a, &b| samples.covariates[a * d].total_cmp(&samples.covariates[b * d]));
        let first = order.iter().map(|&i| samples.covariates[i * d]).collect();
        Ok(Self {
            samples,
            h_response,
            h_cov,
            rule,
            covariate_set: Vec::new(),
            order,
            first,
        })
    }

    pub fn with_covariate_set(mut self, set: Vec<Covariate>) -> Result<Self> {
        check_dim("covariate set", self.samples.d, set.len())?;
        self.covariate_set = set;
        Ok(self)
    }

    pub fn covariate_set(&self) -> &[Covariate] {
        &self.covariate_set
    }

    pub fn samples(&self) -> &DensitySamples {
        &self.samples
    }

    pub fn bandwidth_response(&self) -> f64 {
        self.h_response
    }

    pub fn bandwidth_covariates(&self) -> &[f64] {
        &self.h_cov
    }

    pub fn rule(&self) -> BandwidthRule {
        self.rule
    }

    pub fn d(&self) -> usize {
        self.samples.d
    }

    fn scaled_dist2(&self, i: usize, c: &[f64]) -> f64 {
        self.samples
            .covariate(i)
            .iter()
            .zip(c)
            .zip(&self.h_cov)
            .map(|((a, b), h)| ((a - b) / h).powi(2))
            .sum()
    }

    /// Samples with non-negligible weight at `c`, and their log weights
    /// relative to the largest. The nearest sample always has weight one, so
    /// points far outside the data reduce to its kernel.
    fn weights(&self, c: &[f64]) -> (Vec<usize>, Vec<f64>) {
        let h0 = self.h_cov[0];
        let n = self.first.len();
        let start = self.first.partition_point(|&v| v < c[0]);

        // nearest neighbour, scanning outward in first-covariate order
        let mut best = f64::INFINITY;
        let (mut lo, mut hi) = (start, start);
        loop {
            let gap_lo = (lo > 0).then(|| ((c[0] - self.first[lo - 1]) / h0).powi(2));
            let gap_hi = (hi < n).then(|| ((self.first[hi] - c[0]) / h0).powi(2));
            let take_lo = match (gap_lo, gap_hi) {
                (None, None) => break,
                (Some(a), Some(b)) => a <= b,
                (Some(_), None) => true,
                (None, Some(_)) => false,
            };
            let gap = if take_lo { gap_lo.unwrap() } else { gap_hi.unwrap() };
            if gap > best {
                break;
            }
            let idx = if take_lo {
                lo -= 1;
                self.order[lo]
            } else {
                hi += 1;
                self.order[hi - 1]
            };
            best = best.min(self.scaled_dist2(idx, c));
        }

        let limit = best + 2.0 * CUTOFF;
        let radius = h0 * limit.sqrt();
        let a = self.first.partition_point(|&v| v < c[0] - radius);
        let b = self.first.partition_point(|&v| v <= c[0] + radius);
        let mut idx = Vec::with_capacity(b - a);
        let mut lw = Vec::with_capacity(b - a);
        for &i in &self.order[a..b] {
            let u2 = self.scaled_dist2(i, c);
            if u2 <= limit {
                idx.push(i);
                lw.push(-0.5 * (u2 - best));
            }
        }
        (idx, lw)
    }

    /// `p(response | covariates)`.
    pub fn conditional_pdf(&self, response: f64, covariates: &[f64]) -> f64 {
        debug_assert_eq!(covariates.len(), self.d());
        let (idx, lw) = self.weights(covariates);
        let mut num = 0.0;
        let mut den = 0.0;
        for (&i, &l) in idx.iter().zip(&lw) {
            let w = l.exp();
            let u = (response - self.samples.responses[i]) / self.h_response;
            num += w * (-0.5 * u * u).exp();
            den += w;
        }
        num / den / self.h_response * (-LN_SQRT_2PI).exp()
    }

    /// Exact draw from the mixture that `conditional_pdf` evaluates.
    pub fn sample_conditional(&self, covariates: &[f64], rng: &mut dyn RngCore) -> f64 {
        let (idx, lw) = self.weights(covariates);
        let w: Vec<f64> = lw.iter().map(|l| l.exp()).collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = idx[idx.len() - 1];
        for (&i, &wi) in idx.iter().zip(&w) {
            if u < wi {
                pick = i;
                break;
            }
            u -= wi;
        }
        let xi: f64 = rng.sample(StandardNormal);
        self.samples.responses[pick] + self.h_response * xi
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = KdeFile {
            responses: self.samples.responses.clone(),
            covariates: (0..self.samples.len()).map(|i| self.samples.covariate(i).to_vec()).collect(),
            bandwidths: std::iter::once(self.h_response).chain(self.h_cov.iter().copied()).collect(),
            rule: self.rule,
            covariate_set: self.covariate_set.clone(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: KdeFile = serde_json::from_str(&text)?;
        if file.bandwidths.len() < 2 {
            return Err(Error::Config(format!("{}: missing bandwidths", path.display())));
        }
        let d = file.bandwidths.len() - 1;
        if file.covariates.iter().any(|c| c.len() != d) {
            return Err(Error::Config(format!("{}: covariate rows do not match bandwidths", path.display())));
        }
        let samples = DensitySamples::new(file.responses, file.covariates.concat(), d)?;
        let kde = Self::with_bandwidths(samples, file.bandwidths[0], file.bandwidths[1..].to_vec(), file.rule)?;
        if file.covariate_set.is_empty() {
            Ok(kde)
        } else {
            kde.with_covariate_set(file.covariate_set)
        }
    }

    /// Curves `p(eta | c)` over `eta_grid` for each covariate point, CSV
    /// columns `<covariate names>, eta_grid, pdf`.
    pub fn write_density_curves(&self, path: &Path, points: &[Vec<f64>], eta_grid: &[f64]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = if self.covariate_set.len() == self.d() {
            self.covariate_set.iter().map(|c| c.name().to_string()).collect()
        } else {
            (1..=self.d()).map(|j| format!("covariate_{j}")).collect()
        };
        header.push("eta_grid".into());
        header.push("pdf".into());
        w.write_record(&header)?;
        for p in points {
            check_dim("density curve covariates", self.d(), p.len())?;
            for &e in eta_grid {
                let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                row.push(e.to_string());
                row.push(self.conditional_pdf(e, p).to_string());
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per-grid-point error sampler drawing `eta[k] ~ p(. | covariates of k)`.
#[derive(Debug, Clone)]
pub struct KdeSampler {
    pub kde: ConditionalKde,
}

impl KdeSampler {
    pub fn new(kde: ConditionalKde) -> Result<Self> {
        if kde.covariate_set().len() != kde.d() {
            return Err(Error::Config("sampler needs the density's covariate set".into()));
        }
        Ok(Self { kde })
    }
}

impl ErrorSampler for KdeSampler {
    fn sample(&self, prev_state: &[f64], prev_error: &[f64], rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        check_dim("previous error", prev_state.len(), prev_error.len())?;
        let set = self.kde.covariate_set();
        let mut c = vec![0.0; set.len()];
        Ok(DVector::from_fn(prev_state.len(), |k, _| {
            for (v, cov) in c.iter_mut().zip(set) {
                *v = cov.value(k, prev_state, prev_error);
            }
            self.kde.sample_conditional(&c, rng)
        }))
    }
}

/// Product-Gaussian joint density estimate.
#[derive(Debug, Clone)]
pub struct JointKde {
    points: Vec<f64>,
    q: usize,
    h: Vec<f64>,
    order: Vec<usize>,
    first: Vec<f64>,
    ln_norm: f64,
}

impl JointKde {
    /// `points` row-major `m x q`, normal-reference bandwidths.
    pub fn fit(points: &[f64], q: usize) -> Result<Self> {
        if q == 0 || points.is_empty() || points.len() % q != 0 {
            return Err(Error::Config("joint density needs a non-empty m x q sample".into()));
        }
        let h = normal_reference_bandwidths(points, q)?;
        Self::with_bandwidths(points, q, h)
    }

    pub fn with_bandwidths(points: &[f64], q: usize, h: Vec<f64>) -> Result<Self> {
        check_dim("joint bandwidths", q, h.len())?;
        let m = points.len() / q;
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| points[a * q].total_cmp(&points[b * q]));
        let first = order.iter().map(|&i| points[i * q]).collect();
        let ln_norm = -(m as f64).ln() - h.iter().map(|v| v.ln() + LN_SQRT_2PI).sum::<f64>();
        Ok(Self {
            points: points.to_vec(),
            q,
            h,
            order,
            first,
            ln_norm,
        })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.h
    }

    /// Density at `x`; kernels beyond 9 bandwidths in the first coordinate
    /// contribute below `1e-17` of their peak and are skipped.
    pub fn pdf(&self, x: &[f64]) -> f64 {
        let r = 9.0 * self.h[0];
        let a = self.first.partition_point(|&v| v < x[0] - r);
        let b = self.first.partition_point(|&v| v <= x[0] + r);
        let q = self.q;
        let mut sum = 0.0;
        for &i in &self.order[a..b] {
            let p = &self.points[i * q..(i + 1) * q];
            let u2: f64 = p.iter().zip(x).zip(&self.h).map(|((a, b), h)| ((a - b) / h).powi(2)).sum();
            sum += (-0.5 * u2).exp();
        }
        sum * self.ln_norm.exp()
    }

    pub fn pdf_many(&self, query: &[f64]) -> Vec<f64> {
        query.chunks_exact(self.q).map(|x| self.pdf(x)).collect()
    }
}

/// Joint KDE values of `samples` (row-major `m x q`) at `query` points.
pub fn joint_pdf(samples: &[f64], q: usize, query: &[f64]) -> Result<Vec<f64>> {
    check_dim("query dimension", 0, query.len() % q)?;
    Ok(JointKde::fit(samples, q)?.pdf_many(query))
}
