//! Ensemble Transform Kalman Filter in its unbiased symmetric square-root
//! form, with pluggable additive model-error sampling.
//!
//! The analysis works in ensemble space: with forecast deviations `X'`
//! (`n_x x n`), the scaled observation-space deviations
//! `W = (n-1)^{-1/2} X'^T H^T R^{-1/2}` are decomposed as `U S V^T` and
//!
//! ```text
//! T      = U (I + S S^T)^{-1/2} U^T
//! X'_a   = X' T
//! mean_a = mean_f + (n-1)^{-1/2} X' U (I + S^T S)^{-1} S V^T R^{-1/2} (y - H mean_f)
//! ```
//!
//! Only the thin SVD is formed; directions outside `range(U)` keep a unit
//! factor in `T`.

use nalgebra::{DMatrix, DVector, SVD};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::model::ForecastModel;
use crate::observation::{ObservationOperator, ObservationRecord};

/// `n_x x n` matrix whose columns are ensemble members.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::Config(format!(
                "ensemble needs at least 2 members, got {}",
                members.ncols()
            )));
        }
        if !members.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("ensemble contains non-finite values".into()));
        }
        Ok(Self { members })
    }

    pub fn from_columns(cols: &[DVector<f64>]) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::Config("empty ensemble".into()));
        }
        Self::new(DMatrix::from_columns(cols))
    }

    /// `n` copies of `center` plus independent `N(0, spread^2)` perturbations.
    pub fn around(center: &DVector<f64>, n: usize, spread: f64, rng: &mut dyn RngCore) -> Result<Self> {
        let members = DMatrix::from_fn(center.len(), n, |r, _| {
            center[r] + spread * Distribution::<f64>::sample(&StandardNormal, &mut *rng)
        });
        Self::new(members)
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    pub fn n(&self) -> usize {
        self.members.ncols()
    }

    pub fn n_x(&self) -> usize {
        self.members.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// Mean and deviation matrix `X - mean 1^T`.
    pub fn deviations(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mean = self.mean();
        let mut dev = self.members.clone();
        for mut col in dev.column_iter_mut() {
            col -= &mean;
        }
        (mean, dev)
    }

    /// Sample covariance with `1/(n-1)` normalization.
    pub fn covariance(&self) -> DMatrix<f64> {
        let (_, dev) = self.deviations();
        &dev * dev.transpose() / (self.n() - 1) as f64
    }

    /// Per-component sample variance.
    pub fn variances(&self) -> DVector<f64> {
        let (_, dev) = self.deviations();
        let scale = 1.0 / (self.n() - 1) as f64;
        DVector::from_iterator(
            self.n_x(),
            dev.row_iter().map(|row| row.iter().map(|v| v * v).sum::<f64>() * scale),
        )
    }

    /// Square root of the state-averaged ensemble variance.
    pub fn spread(&self) -> f64 {
        let v = self.variances();
        (v.sum() / v.len() as f64).sqrt()
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.members.row(k).iter().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub analysis: Ensemble,
    pub forecast: Ensemble,
    /// `mean(analysis) - mean(forecast)`.
    pub increment_mean: DVector<f64>,
}

fn check_r_diag(h: &ObservationOperator, r_diag: &[f64]) -> Result<()> {
    check_dim("observation variance", h.n_y(), r_diag.len())?;
    if r_diag.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::Config("observation variances must be positive".into()));
    }
    Ok(())
}

/// One ETKF analysis step.
pub fn etkf_analysis(
    forecast: &Ensemble,
    y: &DVector<f64>,
    h: &ObservationOperator,
    r_diag: &[f64],
) -> Result<AnalysisResult> {
    check_dim("forecast state", h.n_x(), forecast.n_x())?;
    check_dim("observation", h.n_y(), y.len())?;
    check_r_diag(h, r_diag)?;

    let n = forecast.n();
    let n_y = h.n_y();
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let (mean_f, dev) = forecast.deviations();
    let r_inv_sqrt: Vec<f64> = r_diag.iter().map(|r| 1.0 / r.sqrt()).collect();

    let w = DMatrix::from_fn(n, n_y, |i, r| {
        dev[(h.observed_indices()[r], i)] * r_inv_sqrt[r] * scale
    });
    let svd = SVD::try_new(w.clone(), true, false, f64::EPSILON, 10_000).ok_or_else(|| {
        Error::Numerical(format!(
            "SVD of the {}x{} scaled observation deviations did not converge (frobenius norm {:.3e}, max abs {:.3e})",
            n,
            n_y,
            w.norm(),
            w.amax()
        ))
    })?;
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let sigma = &svd.singular_values;

    // (I + W W^T)^{-1} W R^{-1/2} d = U diag(s / (1 + s^2)) U^T W R^{-1/2} d
    // U^T W = diag(s) V^T, so the mean weights only need U and s.
    let d_scaled = DVector::from_iterator(
        n_y,
        (0..n_y).map(|r| (y[r] - mean_f[h.observed_indices()[r]]) * r_inv_sqrt[r]),
    );
    let mut coeff = u.transpose() * (&w * &d_scaled);
    for (c, s) in coeff.iter_mut().zip(sigma.iter()) {
        *c /= 1.0 + s * s;
    }
    let weights = u * coeff * scale;
    let mean_a = &mean_f + &dev * &weights;

    // T = I + U diag((1 + s^2)^{-1/2} - 1) U^T
    let mut u_scaled = u.clone();
    for (mut col, s) in u_scaled.column_iter_mut().zip(sigma.iter()) {
        col *= 1.0 / (1.0 + s * s).sqrt() - 1.0;
    }
    let mut t = u_scaled * u.transpose();
    for i in 0..n {
        t[(i, i)] += 1.0;
    }
    let mut members = &dev * t;
    for mut col in members.column_iter_mut() {
        col += &mean_a;
    }
    let analysis = Ensemble::new(members)?;
    let increment_mean = &mean_a - &mean_f;
    Ok(AnalysisResult {
        analysis,
        forecast: forecast.clone(),
        increment_mean,
    })
}

/// Scales deviations by `sqrt(lambda)` about the unchanged mean.
pub fn multiplicative_inflation(e: &Ensemble, lambda: f64) -> Result<Ensemble> {
    if !(lambda >= 1.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("inflation factor must be >= 1, got {lambda}")));
    }
    if lambda == 1.0 {
        return Ok(e.clone());
    }
    let (mean, mut dev) = e.deviations();
    dev *= lambda.sqrt();
    for mut col in dev.column_iter_mut() {
        col += &mean;
    }
    Ensemble::new(dev)
}

/// Source of additive model errors applied to each forecast member.
///
/// `prev_state` is the member's state at the start of the interval and
/// `prev_error` the error drawn for it on the previous interval (zeros on
/// the first). The returned vector is added to `M(prev_state)`.
pub trait ErrorSampler: Sync {
    fn sample(
        &self,
        prev_state: &[f64],
        prev_error: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>>;
}

/// No model error.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroSampler;

impl ErrorSampler for ZeroSampler {
    fn sample(&self, prev_state: &[f64], _: &[f64], _: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(DVector::zeros(prev_state.len()))
    }
}

/// State-independent Gaussian errors `N(mean, L L^T)`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    pub mean: DVector<f64>,
    pub factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let factor = psd_factor(cov)?;
        Ok(Self { mean, factor })
    }
}

impl ErrorSampler for GaussianSampler {
    fn sample(&self, _: &[f64], _: &[f64], rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        let z = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(&mut *rng));
        Ok(&self.mean + &self.factor * z)
    }
}

/// Lower factor `L` with `L L^T = cov` for a symmetric PSD matrix. Tries
/// Cholesky, then once more with `1e-12 * trace / n` jitter.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    check_dim("covariance columns", n, cov.ncols())?;
    let trace = cov.trace();
    if trace == 0.0 && cov.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let jitter = 1e-12 * trace.abs() / n as f64;
    let mut jittered = cov.clone();
    for i in 0..n {
        jittered[(i, i)] += jitter;
    }
    jittered
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical("covariance factorization failed after jitter".into()))
}

/// Members plus the error each one received on the last interval.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub ensemble: Ensemble,
    pub last_errors: DMatrix<f64>,
}

impl FilterState {
    pub fn new(ensemble: Ensemble) -> Self {
        let last_errors = DMatrix::zeros(ensemble.n_x(), ensemble.n());
        Self {
            ensemble,
            last_errors,
        }
    }
}

/// Propagates every member one interval and adds one sampled error per
/// member. Propagation runs in parallel; sampling is sequential so that the
/// draw order is fixed.
pub fn forecast_step<M, S>(
    model: &M,
    sampler: &S,
    state: &FilterState,
    rng: &mut dyn RngCore,
) -> Result<FilterState>
where
    M: ForecastModel + ?Sized,
    S: ErrorSampler + ?Sized,
{
    let members = state.ensemble.members();
    let n_x = members.nrows();
    let mut cols: Vec<Vec<f64>> = members.column_iter().map(|c| c.iter().copied().collect()).collect();
    cols.par_iter_mut().try_for_each(|c| model.advance(c))?;

    let mut errors = DMatrix::zeros(n_x, cols.len());
    for (i, col) in cols.iter_mut().enumerate() {
        let prev: Vec<f64> = members.column(i).iter().copied().collect();
        let prev_err: Vec<f64> = state.last_errors.column(i).iter().copied().collect();
        let eta = sampler.sample(&prev, &prev_err, rng)?;
        check_dim("sampled error", n_x, eta.len())?;
        for (x, e) in col.iter_mut().zip(eta.iter()) {
            *x += e;
        }
        errors.set_column(i, &eta);
    }
    let flat: Vec<f64> = cols.into_iter().flatten().collect();
    Ok(FilterState {
        ensemble: Ensemble::new(DMatrix::from_vec(n_x, members.ncols(), flat))?,
        last_errors: errors,
    })
}

#[derive(Debug, Clone, Default)]
pub struct FilterOptions {
    /// Multiplicative inflation applied to the forecast before analysis.
    pub inflation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleDiagnostics {
    pub cycle: usize,
    pub forecast_rmse: f64,
    pub analysis_rmse: f64,
    pub mean_spread: f64,
    pub innovation_norm: f64,
}

fn rmse_against(mean: &DVector<f64>, truth: Option<&DVector<f64>>, h: &ObservationOperator, y: &DVector<f64>) -> f64 {
    match truth {
        Some(t) => ((mean - t).norm_squared() / t.len() as f64).sqrt(),
        None => ((h.observe(mean.as_slice()) - y).norm_squared() / y.len() as f64).sqrt(),
    }
}

pub fn cycle_diagnostics(
    cycle: usize,
    result: &AnalysisResult,
    y: &DVector<f64>,
    h: &ObservationOperator,
    truth: Option<&DVector<f64>>,
) -> CycleDiagnostics {
    let mf = result.forecast.mean();
    let ma = result.analysis.mean();
    CycleDiagnostics {
        cycle,
        forecast_rmse: rmse_against(&mf, truth, h, y),
        analysis_rmse: rmse_against(&ma, truth, h, y),
        mean_spread: result.forecast.spread(),
        innovation_norm: (y - h.observe(mf.as_slice())).norm(),
    }
}

/// Runs forecast/analysis cycles, handing each result to `on_cycle`
/// instead of keeping it. `truth[j]` (if given) is the true state at the
/// time of `observations[j]` and only feeds the diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn run_filter_with<M, S, F>(
    model: &M,
    sampler: &S,
    observations: &[ObservationRecord],
    h: &ObservationOperator,
    r_diag: &[f64],
    e0: Ensemble,
    opts: &FilterOptions,
    truth: Option<&[DVector<f64>]>,
    rng: &mut dyn RngCore,
    mut on_cycle: F,
) -> Result<Vec<CycleDiagnostics>>
where
    M: ForecastModel + ?Sized,
    S: ErrorSampler + ?Sized,
    F: FnMut(usize, &AnalysisResult, &FilterState) -> Result<()>,
{
    check_r_diag(h, r_diag)?;
    if let Some(t) = truth {
        check_dim("truth length", observations.len(), t.len())?;
    }
    let mut state = FilterState::new(e0);
    let mut diags = Vec::with_capacity(observations.len());
    for (j, obs) in observations.iter().enumerate() {
        let cycle = j + 1;
        let wrap = |e: Error| Error::FilterCycle {
            cycle,
            source: Box::new(e),
        };
        let mut fc = forecast_step(model, sampler, &state, rng).map_err(wrap)?;
        if let Some(lambda) = opts.inflation {
            fc.ensemble = multiplicative_inflation(&fc.ensemble, lambda).map_err(wrap)?;
        }
        let y = obs.y_vector();
        let result = etkf_analysis(&fc.ensemble, &y, h, r_diag).map_err(wrap)?;
        diags.push(cycle_diagnostics(cycle, &result, &y, h, truth.map(|t| &t[j])));
        state = FilterState {
            ensemble: result.analysis.clone(),
            last_errors: fc.last_errors,
        };
        on_cycle(cycle, &result, &state).map_err(wrap)?;
    }
    Ok(diags)
}

/// Runs the filter and keeps every cycle's result.
#[allow(clippy::too_many_arguments)]
pub fn run_filter<M, S>(
    model: &M,
    sampler: &S,
    observations: &[ObservationRecord],
    h: &ObservationOperator,
    r_diag: &[f64],
    e0: Ensemble,
    opts: &FilterOptions,
    rng: &mut dyn RngCore,
) -> Result<Vec<AnalysisResult>>
where
    M: ForecastModel + ?Sized,
    S: ErrorSampler + ?Sized,
{
    let mut out = Vec::with_capacity(observations.len());
    run_filter_with(model, sampler, observations, h, r_diag, e0, opts, None, rng, |_, r, _| {
        out.push(r.clone());
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_ensemble(n_x: usize, n: usize, seed: u64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ensemble::new(DMatrix::from_fn(n_x, n, |r, _| {
            r as f64 + 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
        }))
        .unwrap()
    }

    #[test]
    fn identical_members_have_zero_deviation() {
        let e = Ensemble::new(DMatrix::from_fn(3, 5, |r, _| r as f64)).unwrap();
        let (mean, dev) = e.deviations();
        assert_eq!(mean.as_slice(), &[0.0, 1.0, 2.0]);
        assert!(dev.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_member_deviations() {
        let e = Ensemble::new(DMatrix::from_column_slice(2, 2, &[1.0, 4.0, 3.0, 0.0])).unwrap();
        let (mean, dev) = e.deviations();
        assert_eq!(mean.as_slice(), &[2.0, 2.0]);
        assert_eq!(dev.column(0).as_slice(), &[-1.0, 2.0]);
        assert_eq!(dev.column(1).as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn deviation_rows_sum_to_zero() {
        let e = random_ensemble(9, 40, 2);
        let (_, dev) = e.deviations();
        for row in dev.row_iter() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_single_member() {
        assert!(Ensemble::new(DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn uninformative_observation_leaves_forecast() {
        let e = random_ensemble(9, 30, 3);
        let h = ObservationOperator::from_one_based(&[3, 4, 8, 9], 9).unwrap();
        let y = DVector::from_element(4, 50.0);
        let res = etkf_analysis(&e, &y, &h, &[1e12; 4]).unwrap();
        let innov = (&y - h.observe(e.mean().as_slice())).norm();
        assert!(res.increment_mean.norm() <= 1e-4 * innov);
        assert!((res.analysis.members() - e.members()).amax() < 1e-4);
    }

    #[test]
    fn analysis_covariance_identity() {
        // X_a' X_a'^T = X' (I + (n-1)^{-1} (HX')^T R^{-1} HX')^{-1} X'^T
        let e = random_ensemble(9, 40, 5);
        let h = ObservationOperator::from_one_based(&[1, 2, 5, 6], 9).unwrap();
        let r = [0.3, 0.5, 0.7, 0.9];
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let res = etkf_analysis(&e, &y, &h, &r).unwrap();
        let (_, xf) = e.deviations();
        let (_, xa) = res.analysis.deviations();
        let hx = h.h_matrix() * &xf;
        let rinv = DMatrix::from_diagonal(&DVector::from_iterator(4, r.iter().map(|v| 1.0 / v)));
        let inner = DMatrix::identity(40, 40) + hx.transpose() * rinv * &hx / 39.0;
        let rhs = &xf * inner.try_inverse().unwrap() * xf.transpose();
        let lhs = &xa * xa.transpose();
        assert!((&lhs - &rhs).norm() / rhs.norm() < 1e-8);
    }

    #[test]
    fn analysis_mean_matches_kalman_gain() {
        let e = random_ensemble(5, 12, 8);
        let h = ObservationOperator::from_one_based(&[2, 4], 5).unwrap();
        let r = [0.2, 0.4];
        let y = DVector::from_vec(vec![0.5, 2.5]);
        let res = etkf_analysis(&e, &y, &h, &r).unwrap();
        let pf = e.covariance();
        let hm = h.h_matrix();
        let rm = DMatrix::from_diagonal(&DVector::from_column_slice(&r));
        let k = &pf * hm.transpose() * (&hm * &pf * hm.transpose() + rm).try_inverse().unwrap();
        let expected = e.mean() + k * (&y - &hm * e.mean());
        assert!((res.analysis.mean() - expected).amax() < 1e-10);
    }

    #[test]
    fn consistent_observation_keeps_mean() {
        let e = random_ensemble(9, 25, 6);
        let h = ObservationOperator::from_one_based(&[3, 4, 8, 9], 9).unwrap();
        let y = h.observe(e.mean().as_slice());
        let res = etkf_analysis(&e, &y, &h, &[1e-2; 4]).unwrap();
        assert!((res.analysis.mean() - e.mean()).amax() < 1e-9);
    }

    #[test]
    fn centering_and_contraction() {
        let e = random_ensemble(9, 20, 7);
        let h = ObservationOperator::from_one_based(&[1, 3, 5], 9).unwrap();
        let y = DVector::from_vec(vec![0.0, 1.0, -1.0]);
        let res = etkf_analysis(&e, &y, &h, &[0.1; 3]).unwrap();
        let (_, xa) = res.analysis.deviations();
        let ones = DVector::from_element(20, 1.0);
        assert!((&xa * ones).norm() <= 1e-9);
        assert!(res.analysis.covariance().trace() <= e.covariance().trace());
        assert!((&res.increment_mean - (res.analysis.mean() - res.forecast.mean())).amax() < 1e-12);
    }

    #[test]
    fn inflation_scales_covariance() {
        let e = random_ensemble(4, 30, 9);
        assert_eq!(multiplicative_inflation(&e, 1.0).unwrap(), e);
        let doubled = multiplicative_inflation(&e, 4.0).unwrap();
        let (m0, d0) = e.deviations();
        let (m1, d1) = doubled.deviations();
        assert!((m0 - m1).amax() < 1e-12);
        assert!((d0 * 2.0 - d1).amax() < 1e-12);
        let inflated = multiplicative_inflation(&e, 1.21).unwrap();
        let ratio = inflated.covariance().component_div(&e.covariance());
        assert!(ratio.iter().all(|r| (r - 1.21).abs() < 1e-10));
        assert!(multiplicative_inflation(&e, 0.9).is_err());
    }

    #[test]
    fn psd_factor_handles_zero_and_full_rank() {
        assert_eq!(psd_factor(&DMatrix::zeros(3, 3)).unwrap(), DMatrix::zeros(3, 3));
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let l = psd_factor(&a).unwrap();
        assert!((&l * l.transpose() - a).amax() < 1e-14);
    }

    #[test]
    fn filter_is_reproducible_and_does_not_degrade_perfect_mean() {
        let model = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.1, 0.9]),
            DVector::from_vec(vec![1.0, 0.5]),
        );
        let h = ObservationOperator::full(2);
        let mut truth = vec![DVector::from_vec(vec![3.0, 1.0])];
        for _ in 0..10 {
            let next = model.forecast(truth.last().unwrap()).unwrap();
            truth.push(next);
        }
        let obs: Vec<ObservationRecord> = truth[1..]
            .iter()
            .enumerate()
            .map(|(j, x)| ObservationRecord {
                time_index: j + 1,
                y: x.iter().copied().collect(),
            })
            .collect();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let e0 = Ensemble::around(&truth[0], 10, 1e-6, &mut rng).unwrap();
            run_filter_with(
                &model,
                &ZeroSampler,
                &obs,
                &h,
                &[1e-4, 1e-4],
                e0,
                &FilterOptions::default(),
                Some(&truth[1..]),
                &mut rng,
                |_, _, _| Ok(()),
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        for d in &a {
            assert!(d.analysis_rmse <= d.forecast_rmse + 1e-12, "{d:?}");
        }
    }
}
