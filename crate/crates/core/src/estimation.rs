//! Offline estimation of additive model errors from observations.
//!
//! Three sliding-window estimators share one commit protocol:
//!
//! * the conditional-variance estimator, which picks the unobserved error
//!   components so that errors become as predictable as possible from the
//!   previous state (binned within-bin variance, trapezoid weighted), while
//!   observed components are fixed by `H x_t = y_t`;
//! * the plain sum-of-squares variant of the same constrained rollout;
//! * long-window weak-constraint 4D-Var over the full error vector.
//!
//! The analysis-increment benchmark lives here too.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::etkf::{self, Ensemble, ErrorSampler, FilterOptions, GaussianSampler, ZeroSampler};
use crate::l96::StateVector;
use crate::lm::{self, LeastSquaresProblem, LmOptions, Termination};
use crate::model::ForecastModel;
use crate::observation::{ObservationOperator, ObservationRecord};

// ---------------------------------------------------------------------------
// Binning

/// Covariates used to bin errors in the conditional-variance cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinCovariates {
    /// `x_{j-1}[k]`.
    XPrev,
    /// `(x_{j-1}[k], x_{j-1}[k-1])`.
    XPrevPair,
}

impl BinCovariates {
    pub fn dims(self) -> usize {
        match self {
            Self::XPrev => 1,
            Self::XPrevPair => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    pub covariates: BinCovariates,
    /// Number of intervals per dimension; there are `n_bins + 1` edges.
    pub n_bins: usize,
}

impl BinSpec {
    pub fn one_dim(n_bins: usize) -> Self {
        Self {
            covariates: BinCovariates::XPrev,
            n_bins,
        }
    }

    pub fn two_dim(n_bins: usize) -> Self {
        Self {
            covariates: BinCovariates::XPrevPair,
            n_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(Error::Config("n_bins must be at least 1".into()));
        }
        Ok(())
    }
}

/// Grid points `a_0 < ... < a_Nb` per covariate dimension. Bin `i` is the
/// neighbourhood `[a_i - da_i/2, a_i + da_{i+1}/2)` of point `a_i`; samples
/// outside the grid go to the nearest end bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinPartition {
    edges: Vec<Vec<f64>>,
}

impl BinPartition {
    pub fn new(edges: Vec<Vec<f64>>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Config("bin partition needs at least one dimension".into()));
        }
        for e in &edges {
            if e.len() < 2 || e.windows(2).any(|w| !(w[1] > w[0])) || !e.iter().all(|v| v.is_finite()) {
                return Err(Error::Config("bin edges must be finite and strictly increasing".into()));
            }
        }
        Ok(Self { edges })
    }

    /// `n_bins + 1` equally spaced points spanning `[lo_d, hi_d]` per
    /// dimension. A degenerate span is widened slightly.
    pub fn equal_width(lo: &[f64], hi: &[f64], n_bins: usize) -> Result<Self> {
        check_dim("bin bounds", lo.len(), hi.len())?;
        if n_bins == 0 {
            return Err(Error::Config("n_bins must be at least 1".into()));
        }
        let edges = lo
            .iter()
            .zip(hi)
            .map(|(&a, &b)| {
                let (mut a, mut b) = (a.min(b), a.max(b));
                let pad = 1e-9 * a.abs().max(b.abs()).max(1.0);
                if b - a < pad {
                    a -= pad;
                    b += pad;
                }
                let width = (b - a) / n_bins as f64;
                (0..=n_bins)
                    .map(|i| if i == n_bins { b } else { a + width * i as f64 })
                    .collect()
            })
            .collect();
        Self::new(edges)
    }

    /// Equal-width partition spanning the samples (`dims` values per sample).
    pub fn spanning(samples: &[f64], dims: usize, n_bins: usize) -> Result<Self> {
        if samples.is_empty() || samples.len() % dims != 0 {
            return Err(Error::Config("covariate samples must be a non-empty multiple of dims".into()));
        }
        let mut lo = vec![f64::INFINITY; dims];
        let mut hi = vec![f64::NEG_INFINITY; dims];
        for point in samples.chunks_exact(dims) {
            for d in 0..dims {
                lo[d] = lo[d].min(point[d]);
                hi[d] = hi[d].max(point[d]);
            }
        }
        Self::equal_width(&lo, &hi, n_bins)
    }

    pub fn dims(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self, d: usize) -> &[f64] {
        &self.edges[d]
    }

    pub fn n_cells(&self) -> usize {
        self.edges.iter().map(Vec::len).product()
    }

    /// Trapezoid coefficients `(da_i + da_{i+1}) / 2` with zero widths past
    /// the ends.
    pub fn coefficients(&self, d: usize) -> Vec<f64> {
        let e = &self.edges[d];
        let n = e.len();
        (0..n)
            .map(|i| {
                let left = if i > 0 { e[i] - e[i - 1] } else { 0.0 };
                let right = if i + 1 < n { e[i + 1] - e[i] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect()
    }

    /// Product trapezoid weight per cell, cells in row-major order with the
    /// first dimension slowest.
    pub fn cell_weights(&self) -> Vec<f64> {
        let mut w = vec![1.0];
        for d in 0..self.dims() {
            let c = self.coefficients(d);
            w = w.iter().flat_map(|&a| c.iter().map(move |&b| a * b)).collect();
        }
        w
    }

    fn index_1d(&self, d: usize, v: f64) -> usize {
        let e = &self.edges[d];
        // number of neighbourhood boundaries (midpoints) at or below v
        let mut lo = 0;
        let mut hi = e.len() - 1;
        while lo < hi {
            let mid = (lo + hi) / 2;
            let boundary = e[mid] + 0.5 * (e[mid + 1] - e[mid]);
            if v >= boundary {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn cell_of(&self, point: &[f64]) -> usize {
        debug_assert_eq!(point.len(), self.dims());
        point
            .iter()
            .enumerate()
            .fold(0, |acc, (d, &v)| acc * self.edges[d].len() + self.index_1d(d, v))
    }
}

/// Index lists `v_i` of the samples (`dims` values each) falling in each cell.
pub fn assign_bins(samples: &[f64], part: &BinPartition) -> Vec<Vec<usize>> {
    let mut bins = vec![Vec::new(); part.n_cells()];
    for (l, point) in samples.chunks_exact(part.dims()).enumerate() {
        bins[part.cell_of(point)].push(l);
    }
    bins
}

/// Unbiased sample variance of `eta[idx]`; zero for fewer than two samples.
pub fn bin_variance(eta: &[f64], idx: &[usize]) -> f64 {
    if idx.len() < 2 {
        return 0.0;
    }
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| eta[i]).sum::<f64>() / n;
    idx.iter().map(|&i| (eta[i] - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Residuals whose squared norm is the trapezoid-weighted sum of within-bin
/// variances, with the partition spanning the given covariates.
fn conditional_variance_residuals(eta: &[f64], covariates: &[f64], spec: &BinSpec, out: &mut [f64]) -> Result<()> {
    let dims = spec.covariates.dims();
    let part = BinPartition::spanning(covariates, dims, spec.n_bins)?;
    let weights = part.cell_weights();
    let n_cells = part.n_cells();
    let cells: Vec<usize> = covariates.chunks_exact(dims).map(|p| part.cell_of(p)).collect();
    let mut sum = vec![0.0; n_cells];
    let mut count = vec![0usize; n_cells];
    for (&c, &e) in cells.iter().zip(eta) {
        sum[c] += e;
        count[c] += 1;
    }
    let scale: Vec<f64> = (0..n_cells)
        .map(|c| if count[c] >= 2 { (weights[c] / (count[c] - 1) as f64).sqrt() } else { 0.0 })
        .collect();
    for ((o, &c), &e) in out.iter_mut().zip(&cells).zip(eta) {
        *o = scale[c] * (e - sum[c] / count[c] as f64);
    }
    Ok(())
}

/// Trapezoid-weighted within-bin variance for flattened errors and
/// covariates.
pub fn conditional_variance(eta: &[f64], covariates: &[f64], spec: &BinSpec) -> Result<f64> {
    spec.validate()?;
    check_dim("covariate samples", eta.len() * spec.covariates.dims(), covariates.len())?;
    let mut r = vec![0.0; eta.len()];
    conditional_variance_residuals(eta, covariates, spec, &mut r)?;
    Ok(r.iter().map(|v| v * v).sum())
}

// ---------------------------------------------------------------------------
// Window rollouts

/// One optimization window: the committed state before it and the `tau + 1`
/// observations it covers.
#[derive(Debug, Clone)]
pub struct WindowProblem<'a> {
    pub x_init: StateVector,
    pub obs: &'a [ObservationRecord],
    pub h: &'a ObservationOperator,
}

impl WindowProblem<'_> {
    pub fn n_positions(&self) -> usize {
        self.obs.len()
    }

    pub fn tau(&self) -> usize {
        self.obs.len().saturating_sub(1)
    }

    fn validate(&self) -> Result<()> {
        if self.obs.is_empty() {
            return Err(Error::Config("window needs at least one observation".into()));
        }
        check_dim("window initial state", self.h.n_x(), self.x_init.len())?;
        for o in self.obs {
            check_dim("window observation", self.h.n_y(), o.y.len())?;
        }
        Ok(())
    }
}

/// States `x_0..x_{tau+1}` (`x_0` the initial state) and errors for each
/// position, stored flat.
#[derive(Debug, Clone)]
pub struct Rollout {
    n_x: usize,
    states: Vec<f64>,
    eta: Vec<f64>,
}

impl Rollout {
    fn new(x_init: &StateVector, positions: usize) -> Self {
        let n_x = x_init.len();
        let mut states = vec![0.0; n_x * (positions + 1)];
        states[..n_x].copy_from_slice(x_init.as_slice());
        Self {
            n_x,
            states,
            eta: vec![0.0; n_x * positions],
        }
    }

    pub fn positions(&self) -> usize {
        self.eta.len() / self.n_x
    }

    /// State before position `l` (`l = positions` gives the final state).
    pub fn state(&self, l: usize) -> &[f64] {
        &self.states[l * self.n_x..(l + 1) * self.n_x]
    }

    pub fn eta(&self, l: usize) -> &[f64] {
        &self.eta[l * self.n_x..(l + 1) * self.n_x]
    }

    /// Flattened errors and `(x_prev[k], x_prev[k-1])` covariates.
    fn samples(&self, covariates: BinCovariates) -> Vec<f64> {
        let n = self.n_x;
        let mut out = Vec::with_capacity(self.eta.len() * covariates.dims());
        for l in 0..self.positions() {
            let s = self.state(l);
            for k in 0..n {
                out.push(s[k]);
                if covariates == BinCovariates::XPrevPair {
                    out.push(s[(k + n - 1) % n]);
                }
            }
        }
        out
    }

    fn advance_into_next<M: ForecastModel + ?Sized>(&mut self, model: &M, l: usize) -> Result<()> {
        let n = self.n_x;
        let (head, tail) = self.states.split_at_mut((l + 1) * n);
        let next = &mut tail[..n];
        next.copy_from_slice(&head[l * n..]);
        model.advance(next)
    }

    /// Constrained rollout from position `from`: observed errors close the
    /// gap to the observation, unobserved ones come from `eta_u`.
    fn run_constrained<M: ForecastModel + ?Sized>(
        &mut self,
        model: &M,
        problem: &WindowProblem,
        eta_u: &[f64],
        from: usize,
    ) -> Result<()> {
        let n = self.n_x;
        let h = problem.h;
        let n_u = h.n_u();
        for l in from..self.positions() {
            self.advance_into_next(model, l)?;
            let next = &mut self.states[(l + 1) * n..(l + 2) * n];
            let eta = &mut self.eta[l * n..(l + 1) * n];
            for (r, &i) in h.observed_indices().iter().enumerate() {
                let y = problem.obs[l].y[r];
                eta[i] = y - next[i];
                next[i] = y;
            }
            for (q, &i) in h.unobserved_indices().iter().enumerate() {
                let e = eta_u[l * n_u + q];
                eta[i] = e;
                next[i] += e;
            }
        }
        Ok(())
    }

    /// Unconstrained rollout with all error components given.
    fn run_full<M: ForecastModel + ?Sized>(&mut self, model: &M, eta_full: &[f64], from: usize) -> Result<()> {
        let n = self.n_x;
        for l in from..self.positions() {
            self.advance_into_next(model, l)?;
            let next = &mut self.states[(l + 1) * n..(l + 2) * n];
            let eta = &mut self.eta[l * n..(l + 1) * n];
            eta.copy_from_slice(&eta_full[l * n..(l + 1) * n]);
            for (x, e) in next.iter_mut().zip(eta.iter()) {
                *x += e;
            }
        }
        Ok(())
    }
}

/// Constrained rollout of a whole window.
pub fn rollout_constrained<M: ForecastModel + ?Sized>(
    model: &M,
    problem: &WindowProblem,
    eta_u: &[f64],
) -> Result<Rollout> {
    problem.validate()?;
    check_dim("unobserved window errors", problem.h.n_u() * problem.n_positions(), eta_u.len())?;
    let mut ro = Rollout::new(&problem.x_init, problem.n_positions());
    ro.run_constrained(model, problem, eta_u, 0)?;
    Ok(ro)
}

/// Rollout of a whole window with every error component given.
pub fn rollout_full<M: ForecastModel + ?Sized>(
    model: &M,
    problem: &WindowProblem,
    eta_full: &[f64],
) -> Result<Rollout> {
    problem.validate()?;
    check_dim("window errors", problem.h.n_x() * problem.n_positions(), eta_full.len())?;
    let mut ro = Rollout::new(&problem.x_init, problem.n_positions());
    ro.run_full(model, eta_full, 0)?;
    Ok(ro)
}

// ---------------------------------------------------------------------------
// Window costs

#[derive(Debug, Clone)]
enum Objective {
    ConditionalVariance(BinSpec),
    SumSquares,
    /// `l_t` is the transposed lower factor of `Q^{-1}`.
    FourDVar { l_t: DMatrix<f64>, r_inv_sqrt: Vec<f64> },
}

struct WindowObjective<'a, M: ?Sized> {
    model: &'a M,
    problem: &'a WindowProblem<'a>,
    objective: &'a Objective,
}

impl<M: ForecastModel + ?Sized> WindowObjective<'_, M> {
    fn per_position(&self) -> usize {
        match self.objective {
            Objective::FourDVar { .. } => self.problem.h.n_x(),
            _ => self.problem.h.n_u(),
        }
    }

    fn roll(&self, ro: &mut Rollout, x: &[f64], from: usize) -> Result<()> {
        match self.objective {
            Objective::FourDVar { .. } => ro.run_full(self.model, x, from),
            _ => ro.run_constrained(self.model, self.problem, x, from),
        }
    }

    fn n_residuals(&self) -> usize {
        let n_x = self.problem.h.n_x();
        let p = self.problem.n_positions();
        match self.objective {
            Objective::FourDVar { .. } => p * (n_x + self.problem.h.n_y()),
            _ => p * n_x,
        }
    }

    fn residuals_of(&self, ro: &Rollout) -> Result<DVector<f64>> {
        let mut r = DVector::zeros(self.n_residuals());
        match self.objective {
            Objective::ConditionalVariance(spec) => {
                let cov = ro.samples(spec.covariates);
                conditional_variance_residuals(&ro.eta, &cov, spec, r.as_mut_slice())?;
            }
            Objective::SumSquares => r.copy_from_slice(&ro.eta),
            Objective::FourDVar { l_t, r_inv_sqrt } => {
                let n_x = ro.n_x;
                let h = self.problem.h;
                let mut offset = 0;
                for l in 0..ro.positions() {
                    let eta = DVector::from_column_slice(ro.eta(l));
                    r.rows_mut(offset, n_x).copy_from(&(l_t * eta));
                    offset += n_x;
                    let x = ro.state(l + 1);
                    for (q, &i) in h.observed_indices().iter().enumerate() {
                        r[offset + q] = r_inv_sqrt[q] * (x[i] - self.problem.obs[l].y[q]);
                    }
                    offset += h.n_y();
                }
            }
        }
        Ok(r)
    }

    /// Forward-difference tangent of one model interval at `x`.
    fn model_tangent(&self, x: &[f64], fd_step: f64) -> Result<DMatrix<f64>> {
        let n = x.len();
        let mut f0 = x.to_vec();
        self.model.advance(&mut f0)?;
        let mut tl = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        for c in 0..n {
            xp.copy_from_slice(x);
            xp[c] += fd_step * x[c].abs().max(1.0);
            let step = xp[c] - x[c];
            self.model.advance(&mut xp)?;
            for r in 0..n {
                tl[(r, c)] = (xp[r] - f0[r]) / step;
            }
        }
        Ok(tl)
    }

    /// 4D-Var Jacobian by the chain rule: the error block is `L^T` on the
    /// diagonal, and `dx_{m+1}/deta_l` is a product of model tangents.
    fn jacobian_4dvar(&self, x: &[f64], l_t: &DMatrix<f64>, r_inv_sqrt: &[f64], fd_step: f64) -> Result<DMatrix<f64>> {
        let mut base = Rollout::new(&self.problem.x_init, self.problem.n_positions());
        base.run_full(self.model, x, 0)?;
        let n = base.n_x;
        let p = base.positions();
        let obs = self.problem.h.observed_indices();
        let stride = n + obs.len();
        let tangents = (1..p)
            .map(|m| self.model_tangent(base.state(m), fd_step))
            .collect::<Result<Vec<_>>>()?;
        let mut jac = DMatrix::zeros(p * stride, p * n);
        for l in 0..p {
            jac.view_mut((l * stride, l * n), (n, n)).copy_from(l_t);
            let mut g = DMatrix::identity(n, n);
            for m in l..p {
                if m > l {
                    g = &tangents[m - 1] * &g;
                }
                for (q, &i) in obs.iter().enumerate() {
                    for c in 0..n {
                        jac[(m * stride + n + q, l * n + c)] = r_inv_sqrt[q] * g[(i, c)];
                    }
                }
            }
        }
        if jac.iter().all(|v| v.is_finite()) {
            Ok(jac)
        } else {
            Err(Error::Numerical("non-finite 4D-Var Jacobian".into()))
        }
    }

    fn evaluate(&self, x: &[f64]) -> Result<DVector<f64>> {
        let mut ro = Rollout::new(&self.problem.x_init, self.problem.n_positions());
        self.roll(&mut ro, x, 0)?;
        self.residuals_of(&ro)
    }
}

impl<M: ForecastModel + ?Sized> LeastSquaresProblem for WindowObjective<'_, M> {
    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.evaluate(x.as_slice()).ok()
    }

    /// Forward differences that reuse the unperturbed rollout up to the
    /// position of each perturbed unknown.
    fn jacobian(&self, x: &DVector<f64>, r: &DVector<f64>, fd_step: f64) -> Option<DMatrix<f64>> {
        if let Objective::FourDVar { l_t, r_inv_sqrt } = self.objective {
            return self.jacobian_4dvar(x.as_slice(), l_t, r_inv_sqrt, fd_step).ok();
        }
        let per = self.per_position();
        let mut base = Rollout::new(&self.problem.x_init, self.problem.n_positions());
        self.roll(&mut base, x.as_slice(), 0).ok()?;
        let mut jac = DMatrix::zeros(r.len(), x.len());
        let mut xp = x.as_slice().to_vec();
        let mut ro = base.clone();
        let n = ro.n_x;
        let mut dirty = 0;
        for i in 0..x.len() {
            let pos = i / per;
            let step = fd_step * x[i].abs().max(1.0);
            xp[i] = x[i] + step;
            let step = xp[i] - x[i];
            // undo the previous column's changes
            ro.states[(dirty + 1) * n..].copy_from_slice(&base.states[(dirty + 1) * n..]);
            ro.eta[dirty * n..].copy_from_slice(&base.eta[dirty * n..]);
            dirty = pos;
            self.roll(&mut ro, &xp, pos).ok()?;
            let rp = self.residuals_of(&ro).ok()?;
            for (j, (a, b)) in rp.iter().zip(r.iter()).enumerate() {
                jac[(j, i)] = (a - b) / step;
            }
            xp[i] = x[i];
        }
        jac.iter().all(|v| v.is_finite()).then_some(jac)
    }
}

/// Conditional-variance cost `J` of a window at unobserved errors `eta_u`
/// (flattened by position, `n_u` values each).
pub fn conditional_variance_cost<M: ForecastModel + ?Sized>(
    problem: &WindowProblem,
    eta_u: &[f64],
    model: &M,
    spec: &BinSpec,
) -> Result<f64> {
    spec.validate()?;
    let ro = rollout_constrained(model, problem, eta_u)?;
    let cov = ro.samples(spec.covariates);
    conditional_variance(&ro.eta, &cov, spec)
}

/// Sum of squared interval errors under the observation constraint.
pub fn cost_sum_squares<M: ForecastModel + ?Sized>(
    problem: &WindowProblem,
    eta_u: &[f64],
    model: &M,
) -> Result<f64> {
    let ro = rollout_constrained(model, problem, eta_u)?;
    Ok(ro.eta.iter().map(|v| v * v).sum())
}

/// Weak-constraint 4D-Var cost without background term:
/// `0.5 sum eta^T Q^-1 eta + 0.5 sum (Hx - y)^T R^-1 (Hx - y)`.
pub fn cost_4dvar_b2<M: ForecastModel + ?Sized>(
    problem: &WindowProblem,
    eta_full: &[f64],
    model: &M,
    q_inv: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
) -> Result<f64> {
    let n_x = problem.h.n_x();
    let n_y = problem.h.n_y();
    check_dim("Q inverse", n_x, q_inv.nrows())?;
    check_dim("R inverse", n_y, r_inv.nrows())?;
    let ro = rollout_full(model, problem, eta_full)?;
    let mut j = 0.0;
    for l in 0..ro.positions() {
        let eta = DVector::from_column_slice(ro.eta(l));
        j += eta.dot(&(q_inv * &eta));
        let d = problem.h.observe(ro.state(l + 1)) - problem.obs[l].y_vector();
        j += d.dot(&(r_inv * &d));
    }
    Ok(0.5 * j)
}

// ---------------------------------------------------------------------------
// Training sets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub time_index: usize,
    /// Estimated `eta_t`.
    pub eta: Vec<f64>,
    /// `x_{t-1}`.
    pub state_prev: Vec<f64>,
    /// `x_t = M(x_{t-1}) + eta_t`.
    pub state: Vec<f64>,
    /// Committed from the last window without further re-optimization.
    pub tail: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window: usize,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// `None` when the optimizer failed and the incumbent guess was kept.
    pub termination: Option<Termination>,
}

/// Committed error estimates in time order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorTrainingSet {
    pub n_x: usize,
    pub records: Vec<TrainingRecord>,
    pub reports: Vec<WindowReport>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    time_index: usize,
    k: usize,
    eta: f64,
    x_prev_k: f64,
    x_prev_km1: f64,
    eta_prev: Option<f64>,
    x_k: f64,
    tail: bool,
}

impl ErrorTrainingSet {
    /// Exact errors `eta_j = x_j - M(x_{j-1})` from a truth trajectory;
    /// record `j` gets time index `first_time_index + j`.
    pub fn from_truth<M: ForecastModel + ?Sized>(
        truth: &[StateVector],
        model: &M,
        first_time_index: usize,
    ) -> Result<Self> {
        let errors = crate::l96::true_additive_errors(truth, model)?;
        let records = errors
            .into_iter()
            .enumerate()
            .map(|(j, eta)| TrainingRecord {
                time_index: first_time_index + j,
                eta: eta.as_slice().to_vec(),
                state_prev: truth[j].as_slice().to_vec(),
                state: truth[j + 1].as_slice().to_vec(),
                tail: false,
            })
            .collect();
        Ok(Self {
            n_x: truth[0].len(),
            records,
            reports: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Pooled per-grid-point samples `(eta*, x*)` over all `k`.
    pub fn flattened(&self, include_tail: bool) -> (Vec<f64>, Vec<f64>) {
        let mut eta = Vec::new();
        let mut x = Vec::new();
        for r in self.records.iter().filter(|r| include_tail || !r.tail) {
            eta.extend_from_slice(&r.eta);
            x.extend_from_slice(&r.state_prev);
        }
        (eta, x)
    }

    pub fn max_abs_eta(&self) -> f64 {
        self.records
            .iter()
            .flat_map(|r| r.eta.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn failed_windows(&self) -> usize {
        self.reports.iter().filter(|r| r.termination.is_none()).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n = self.n_x;
        for (j, r) in self.records.iter().enumerate() {
            let prev = j
                .checked_sub(1)
                .map(|p| &self.records[p])
                .filter(|p| p.time_index + 1 == r.time_index);
            for k in 0..n {
                w.serialize(CsvRow {
                    time_index: r.time_index,
                    k: k + 1,
                    eta: r.eta[k],
                    x_prev_k: r.state_prev[k],
                    x_prev_km1: r.state_prev[(k + n - 1) % n],
                    eta_prev: prev.map(|p| p.eta[k]),
                    x_k: r.state[k],
                    tail: r.tail,
                })?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut records: Vec<TrainingRecord> = Vec::new();
        let mut n_x = 0;
        for row in rd.deserialize() {
            let row: CsvRow = row?;
            if row.k == 1 {
                records.push(TrainingRecord {
                    time_index: row.time_index,
                    eta: Vec::new(),
                    state_prev: Vec::new(),
                    state: Vec::new(),
                    tail: row.tail,
                });
            }
            let rec = records
                .last_mut()
                .filter(|r| r.time_index == row.time_index && r.eta.len() + 1 == row.k)
                .ok_or_else(|| Error::Config(format!("{}: rows out of order at time {}", path.display(), row.time_index)))?;
            rec.eta.push(row.eta);
            rec.state_prev.push(row.x_prev_k);
            rec.state.push(row.x_k);
            n_x = n_x.max(row.k);
        }
        if records.iter().any(|r| r.eta.len() != n_x) {
            return Err(Error::Config(format!("{}: ragged training set", path.display())));
        }
        Ok(Self {
            n_x,
            records,
            reports: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// Sliding-window estimators

/// Which window cost the sliding-window estimator minimizes.
#[derive(Debug, Clone)]
pub enum WindowMethod {
    ConditionalVariance(BinSpec),
    SumSquares,
    /// Weak-constraint 4D-Var with model-error covariance `q` (regularized
    /// before inversion) and diagonal observation variances.
    FourDVar { q: DMatrix<f64>, r_diag: Vec<f64> },
}

/// Adds a small ridge so that a singular (even zero) covariance can be
/// inverted.
pub fn regularized_inverse(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    check_dim("covariance columns", n, q.ncols())?;
    let ridge = (1e-9 * q.trace().abs() / n as f64).max(1e-12);
    let mut reg = q.clone();
    for i in 0..n {
        reg[(i, i)] += ridge;
    }
    reg.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("model-error covariance is not positive semi-definite".into()))
}

fn objective_for(method: &WindowMethod, h: &ObservationOperator) -> Result<Objective> {
    Ok(match method {
        WindowMethod::ConditionalVariance(spec) => {
            spec.validate()?;
            Objective::ConditionalVariance(*spec)
        }
        WindowMethod::SumSquares => Objective::SumSquares,
        WindowMethod::FourDVar { q, r_diag } => {
            check_dim("Q", h.n_x(), q.nrows())?;
            check_dim("observation variance", h.n_y(), r_diag.len())?;
            if r_diag.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::Config("observation variances must be positive".into()));
            }
            let q_inv = regularized_inverse(q)?;
            let l = q_inv
                .cholesky()
                .ok_or_else(|| Error::Numerical("Q inverse is not positive definite".into()))?
                .l();
            Objective::FourDVar {
                l_t: l.transpose(),
                r_inv_sqrt: r_diag.iter().map(|r| 1.0 / r.sqrt()).collect(),
            }
        }
    })
}

/// Sliding-window estimation over observations `y_1..y_T` starting from
/// `x0`. For `t = 1..T-tau` the window `t..t+tau` is optimized from the
/// current guesses (new unknowns start at zero), then `eta_t` and `x_t` are
/// committed. The last window's remaining estimates are committed with
/// `tail = true`.
pub fn estimate_errors<M: ForecastModel + ?Sized>(
    method: &WindowMethod,
    observations: &[ObservationRecord],
    x0: &StateVector,
    model: &M,
    h: &ObservationOperator,
    tau: usize,
    lm_opts: &LmOptions,
) -> Result<ErrorTrainingSet> {
    estimate_errors_with(method, observations, x0, model, h, tau, lm_opts, |_| {})
}

/// As [`estimate_errors`], reporting each finished window.
#[allow(clippy::too_many_arguments)]
pub fn estimate_errors_with<M, F>(
    method: &WindowMethod,
    observations: &[ObservationRecord],
    x0: &StateVector,
    model: &M,
    h: &ObservationOperator,
    tau: usize,
    lm_opts: &LmOptions,
    mut on_window: F,
) -> Result<ErrorTrainingSet>
where
    M: ForecastModel + ?Sized,
    F: FnMut(&WindowReport),
{
    let t_len = observations.len();
    if t_len < tau + 1 {
        return Err(Error::Config(format!(
            "training needs at least tau + 1 = {} observations, got {t_len}",
            tau + 1
        )));
    }
    check_dim("initial state", h.n_x(), x0.len())?;
    lm_opts.validate()?;
    let objective = objective_for(method, h)?;
    let per = match objective {
        Objective::FourDVar { .. } => h.n_x(),
        _ => h.n_u(),
    };
    let positions = tau + 1;
    let n_windows = t_len - tau;

    let mut guess = vec![0.0; per * positions];
    let mut x_prev = x0.clone();
    let mut set = ErrorTrainingSet {
        n_x: h.n_x(),
        records: Vec::with_capacity(t_len),
        reports: Vec::with_capacity(n_windows),
    };

    for t in 0..n_windows {
        let problem = WindowProblem {
            x_init: x_prev.clone(),
            obs: &observations[t..t + positions],
            h,
        };
        problem.validate()?;
        let wo = WindowObjective {
            model,
            problem: &problem,
            objective: &objective,
        };
        let start = DVector::from_column_slice(&guess);
        let (solution, report) = match lm::minimize(&wo, &start, lm_opts) {
            Ok(res) => {
                let report = WindowReport {
                    window: t + 1,
                    iterations: res.iterations,
                    initial_cost: res.initial_cost,
                    final_cost: res.final_cost,
                    termination: Some(res.termination),
                };
                (res.solution.as_slice().to_vec(), report)
            }
            Err(_) => (
                guess.clone(),
                WindowReport {
                    window: t + 1,
                    iterations: 0,
                    initial_cost: f64::NAN,
                    final_cost: f64::NAN,
                    termination: None,
                },
            ),
        };
        on_window(&report);
        set.reports.push(report);

        let mut ro = Rollout::new(&problem.x_init, positions);
        wo.roll(&mut ro, &solution, 0)
            .map_err(|e| Error::Numerical(format!("window {}: rollout of committed errors failed: {e}", t + 1)))?;
        let last = t + 1 == n_windows;
        let commit = if last { positions } else { 1 };
        for l in 0..commit {
            set.records.push(TrainingRecord {
                time_index: observations[t + l].time_index,
                eta: ro.eta(l).to_vec(),
                state_prev: ro.state(l).to_vec(),
                state: ro.state(l + 1).to_vec(),
                tail: l > 0,
            });
        }
        x_prev = DVector::from_column_slice(ro.state(1));
        guess.copy_within(per.., 0);
        let len = guess.len();
        guess[len - per..].fill(0.0);
    }
    Ok(set)
}

pub fn estimate_errors_proposed<M: ForecastModel + ?Sized>(
    observations: &[ObservationRecord],
    x0: &StateVector,
    model: &M,
    h: &ObservationOperator,
    spec: &BinSpec,
    tau: usize,
    lm_opts: &LmOptions,
) -> Result<ErrorTrainingSet> {
    estimate_errors(&WindowMethod::ConditionalVariance(*spec), observations, x0, model, h, tau, lm_opts)
}

pub fn estimate_errors_sum_squares<M: ForecastModel + ?Sized>(
    observations: &[ObservationRecord],
    x0: &StateVector,
    model: &M,
    h: &ObservationOperator,
    tau: usize,
    lm_opts: &LmOptions,
) -> Result<ErrorTrainingSet> {
    estimate_errors(&WindowMethod::SumSquares, observations, x0, model, h, tau, lm_opts)
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_errors_b2<M: ForecastModel + ?Sized>(
    observations: &[ObservationRecord],
    x0: &StateVector,
    model: &M,
    h: &ObservationOperator,
    q: &DMatrix<f64>,
    r_diag: &[f64],
    tau: usize,
    lm_opts: &LmOptions,
) -> Result<ErrorTrainingSet> {
    let method = WindowMethod::FourDVar {
        q: q.clone(),
        r_diag: r_diag.to_vec(),
    };
    estimate_errors(&method, observations, x0, model, h, tau, lm_opts)
}

/// Sample covariance (`1/(N-1)`) of a set of vectors.
pub fn sample_covariance(vs: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if vs.len() < 2 {
        return Err(Error::Config("sample covariance needs at least two vectors".into()));
    }
    let n = vs[0].len();
    let mut mean = DVector::zeros(n);
    for v in vs {
        check_dim("sample vector", n, v.len())?;
        mean += v;
    }
    mean /= vs.len() as f64;
    let mut cov = DMatrix::zeros(n, n);
    for v in vs {
        let d = v - &mean;
        cov += &d * d.transpose();
    }
    cov /= (vs.len() - 1) as f64;
    Ok((mean, cov))
}

// ---------------------------------------------------------------------------
// Analysis-increment benchmark

/// Gaussian error statistics from analysis increments: forecasts receive
/// `-alpha * eta` with `eta ~ N(mean, covariance)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementStats {
    pub mean: Vec<f64>,
    /// Row-major `n_x x n_x`.
    pub covariance: Vec<f64>,
    pub alpha: f64,
    pub lambda: f64,
}

impl IncrementStats {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>, alpha: f64, lambda: f64) -> Self {
        let n = mean.len();
        Self {
            mean: mean.as_slice().to_vec(),
            covariance: (0..n * n).map(|i| cov[(i / n, i % n)]).collect(),
            alpha,
            lambda,
        }
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn cov_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.mean.len();
        check_dim("increment covariance", n * n, self.covariance.len())?;
        Ok(DMatrix::from_row_slice(n, n, &self.covariance))
    }

    /// Sampler for the applied term `-alpha * eta`.
    pub fn sampler(&self) -> Result<GaussianSampler> {
        let mean = -self.alpha * self.mean_vector();
        let cov = self.cov_matrix()? * (self.alpha * self.alpha);
        GaussianSampler::new(mean, &cov)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One draw of `-alpha * eta`, `eta ~ N(mean, covariance)`.
pub fn sample_error_b1(stats: &IncrementStats, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
    let n = stats.mean.len();
    stats.sampler()?.sample(&vec![0.0; n], &vec![0.0; n], rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct B1Config {
    pub lambda_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    /// Leading cycles left out of the statistics and scores.
    pub spinup_cycles: usize,
    /// Cycles used to score each alpha candidate.
    pub alpha_cycles: usize,
}

impl Default for B1Config {
    fn default() -> Self {
        Self {
            lambda_grid: vec![1.0, 1.02, 1.05, 1.1, 1.2, 1.5],
            alpha_grid: (1..=10).map(|i| i as f64 / 10.0).collect(),
            spinup_cycles: 20,
            alpha_cycles: 500,
        }
    }
}

impl B1Config {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() || self.alpha_grid.is_empty() {
            return Err(Error::Config("B1 tuning grids must be non-empty".into()));
        }
        if self.lambda_grid.iter().any(|&l| !(l >= 1.0)) || self.alpha_grid.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Config("B1 grids need lambda >= 1 and alpha >= 0".into()));
        }
        if self.alpha_cycles == 0 {
            return Err(Error::Config("alpha_cycles must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct B1Estimate {
    pub stats: IncrementStats,
    /// Applied errors `alpha * (mean_a - mean_f)` against the previous
    /// analysis mean, from the selected reanalysis.
    pub training: ErrorTrainingSet,
    /// Innovation RMSE per lambda; `None` for diverged candidates.
    pub lambda_scores: Vec<(f64, Option<f64>)>,
    /// `|ln(spread / rmse)|` per alpha; `None` for diverged candidates.
    pub alpha_scores: Vec<(f64, Option<f64>)>,
}

struct Reanalysis {
    score: f64,
    /// `mean_f - mean_a` per cycle after spin-up.
    increments: Vec<DVector<f64>>,
    records: Vec<TrainingRecord>,
}

#[allow(clippy::too_many_arguments)]
fn reanalysis<M: ForecastModel + ?Sized>(
    observations: &[ObservationRecord],
    model: &M,
    h: &ObservationOperator,
    r_diag: &[f64],
    e0: &Ensemble,
    lambda: f64,
    spinup: usize,
    mut rng: ChaCha8Rng,
) -> Result<Reanalysis> {
    let opts = FilterOptions {
        inflation: Some(lambda),
    };
    let mut increments = Vec::new();
    let mut records = Vec::new();
    let mut prev_mean = e0.mean();
    let diags = etkf::run_filter_with(
        model,
        &ZeroSampler,
        observations,
        h,
        r_diag,
        e0.clone(),
        &opts,
        None,
        &mut rng,
        |cycle, res, _| {
            let mean_a = res.analysis.mean();
            if cycle > spinup {
                increments.push(-&res.increment_mean);
                records.push(TrainingRecord {
                    time_index: observations[cycle - 1].time_index,
                    eta: res.increment_mean.as_slice().to_vec(),
                    state_prev: prev_mean.as_slice().to_vec(),
                    state: mean_a.as_slice().to_vec(),
                    tail: false,
                });
            }
            prev_mean = mean_a;
            Ok(())
        },
    )?;
    let scored: Vec<f64> = diags
        .iter()
        .skip(spinup)
        .map(|d| d.innovation_norm.powi(2) / h.n_y() as f64)
        .collect();
    let score = (scored.iter().sum::<f64>() / scored.len().max(1) as f64).sqrt();
    Ok(Reanalysis {
        score,
        increments,
        records,
    })
}

/// Spread/error mismatch `|ln(spread / rmse)|` in observation space for a
/// filter run with the given sampler.
#[allow(clippy::too_many_arguments)]
fn spread_mismatch<M: ForecastModel + ?Sized, S: ErrorSampler + ?Sized>(
    observations: &[ObservationRecord],
    model: &M,
    sampler: &S,
    h: &ObservationOperator,
    r_diag: &[f64],
    e0: &Ensemble,
    spinup: usize,
    mut rng: ChaCha8Rng,
) -> Result<f64> {
    let mut spread2 = 0.0;
    let mut err2 = 0.0;
    let mut count = 0usize;
    etkf::run_filter_with(
        model,
        sampler,
        observations,
        h,
        r_diag,
        e0.clone(),
        &FilterOptions::default(),
        None,
        &mut rng,
        |cycle, res, _| {
            if cycle > spinup {
                let var = res.forecast.variances();
                let mean = res.forecast.mean();
                let y = &observations[cycle - 1].y;
                for (q, &i) in h.observed_indices().iter().enumerate() {
                    spread2 += var[i] + r_diag[q];
                    err2 += (mean[i] - y[q]).powi(2);
                }
                count += 1;
            }
            Ok(())
        },
    )?;
    if count == 0 || !(spread2 > 0.0 && err2 > 0.0) {
        return Err(Error::Numerical("spread/error comparison has no usable cycles".into()));
    }
    Ok(0.5 * (spread2 / err2).ln().abs())
}

/// Tunes the reanalysis inflation on innovation RMSE, takes increment
/// statistics from the best reanalysis, then picks `alpha` by matching
/// forecast spread to forecast error on the first `alpha_cycles` cycles.
#[allow(clippy::too_many_arguments)]
pub fn estimate_increment_stats_b1<M: ForecastModel + ?Sized>(
    observations: &[ObservationRecord],
    model: &M,
    h: &ObservationOperator,
    r_diag: &[f64],
    e0: &Ensemble,
    cfg: &B1Config,
    rng: &ChaCha8Rng,
) -> Result<B1Estimate> {
    cfg.validate()?;
    if observations.len() < cfg.spinup_cycles + 2 {
        return Err(Error::Config("too few observations for the increment benchmark".into()));
    }
    let mut lambda_scores = Vec::new();
    let mut best: Option<(f64, Reanalysis)> = None;
    for &lambda in &cfg.lambda_grid {
        let run = reanalysis(observations, model, h, r_diag, e0, lambda, cfg.spinup_cycles, rng.clone())
            .ok()
            .filter(|r| r.score.is_finite());
        lambda_scores.push((lambda, run.as_ref().map(|r| r.score)));
        if let Some(run) = run {
            if best.as_ref().is_none_or(|(_, b)| run.score < b.score) {
                best = Some((lambda, run));
            }
        }
    }
    let (lambda, run) = best.ok_or_else(|| Error::Numerical("every inflation candidate diverged".into()))?;
    let (mean, cov) = sample_covariance(&run.increments)?;
    let cov = 0.5 * (&cov + cov.transpose());

    let n_alpha = cfg.alpha_cycles.min(observations.len());
    let alpha_spinup = cfg.spinup_cycles.min(n_alpha / 5);
    let mut alpha_scores = Vec::new();
    let mut best_alpha: Option<(f64, f64)> = None;
    for &alpha in &cfg.alpha_grid {
        let stats = IncrementStats::new(&mean, &cov, alpha, lambda);
        let score = stats.sampler().ok().and_then(|s| {
            spread_mismatch(&observations[..n_alpha], model, &s, h, r_diag, e0, alpha_spinup, rng.clone())
                .ok()
                .filter(|v| v.is_finite())
        });
        alpha_scores.push((alpha, score));
        if let Some(score) = score {
            if best_alpha.is_none_or(|(_, b)| score < b) {
                best_alpha = Some((alpha, score));
            }
        }
    }
    let (alpha, _) = best_alpha.ok_or_else(|| Error::Numerical("every alpha candidate diverged".into()))?;
    let stats = IncrementStats::new(&mean, &cov, alpha, lambda);

    let records = run
        .records
        .into_iter()
        .map(|mut r| {
            r.eta.iter_mut().for_each(|v| *v *= alpha);
            r
        })
        .collect();
    Ok(B1Estimate {
        stats,
        training: ErrorTrainingSet {
            n_x: h.n_x(),
            records,
            reports: Vec::new(),
        },
        lambda_scores,
        alpha_scores,
    })
}
