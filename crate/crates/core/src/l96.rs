//! Multi-scale and single-scale Lorenz 96 dynamics.
//!
//! The multi-scale system uses the form with an explicit time-scale
//! separation `xi`:
//!
//! ```text
//! dX_k/dt   = -X_{k-1}(X_{k-2} - X_{k+1}) - X_k + F + (h_x / L) sum_l Z_{l,k}
//! dZ_{l,k}/dt = (1/xi) (-Z_{l+1,k}(Z_{l+2,k} - Z_{l-1,k}) - Z_{l,k} + h_z X_k)
//! ```
//!
//! with `L = n_z`. Fast variables are stored column-major by slow index, i.e.
//! `fast[k * n_z + l]`, so the boundary rule `Z_{l+n_z,k} = Z_{l,k+1}` is a
//! plain periodic wrap of the flat vector.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::ForecastModel;
use crate::rk4::Rk4;

/// Slow-variable state vector.
pub type StateVector = DVector<f64>;

/// Model time-step used throughout, in model time units.
pub const DEFAULT_DT: f64 = 8e-4;

/// Transient discarded from the start of every truth run, in MTU.
pub const DEFAULT_TRANSIENT_MTU: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L96Params {
    /// Time-scale separation between slow and fast variables.
    pub xi: f64,
    /// Coupling of the fast variables onto the slow ones.
    pub h_x: f64,
    /// Coupling of the slow variables onto the fast ones.
    pub h_z: f64,
    pub n_x: usize,
    /// Fast variables per slow variable.
    pub n_z: usize,
    pub forcing: f64,
}

impl L96Params {
    /// Large time-scale separation regime.
    pub fn case1() -> Self {
        Self {
            xi: 1.0 / 128.0,
            h_x: -0.8,
            h_z: 1.0,
            n_x: 9,
            n_z: 128,
            forcing: 10.0,
        }
    }

    /// Small time-scale separation, strong coupling regime.
    pub fn case2() -> Self {
        Self {
            xi: 0.7,
            h_x: -2.0,
            h_z: 1.0,
            n_x: 9,
            n_z: 20,
            forcing: 14.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!("xi must be positive, got {}", self.xi)));
        }
        if self.n_x < 4 {
            return Err(Error::Config(format!("n_x must be >= 4, got {}", self.n_x)));
        }
        if self.n_z < 4 {
            return Err(Error::Config(format!("n_z must be >= 4, got {}", self.n_z)));
        }
        if !(self.h_x.is_finite() && self.h_z.is_finite() && self.forcing.is_finite()) {
            return Err(Error::Config("couplings and forcing must be finite".into()));
        }
        Ok(())
    }

    pub fn n_fast(&self) -> usize {
        self.n_x * self.n_z
    }
}

/// Coupled slow and fast state.
#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub slow: Vec<f64>,
    /// Column-major by slow index: `fast[k * n_z + l]`.
    pub fast: Vec<f64>,
}

impl FullState {
    pub fn zeros(p: &L96Params) -> Self {
        Self {
            slow: vec![0.0; p.n_x],
            fast: vec![0.0; p.n_fast()],
        }
    }

    /// Random initial condition: slow variables around `F/2`-ish noise,
    /// fast variables small.
    pub fn random<R: Rng + ?Sized>(p: &L96Params, rng: &mut R) -> Self {
        let slow = (0..p.n_x)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0 + 1.0)
            .collect();
        let fast = (0..p.n_fast())
            .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1)
            .collect();
        Self { slow, fast }
    }

    pub fn z(&self, p: &L96Params, l: usize, k: usize) -> f64 {
        self.fast[k * p.n_z + l]
    }

    pub fn check(&self, p: &L96Params) -> Result<()> {
        check_dim("FullState slow", p.n_x, self.slow.len())?;
        check_dim("FullState fast", p.n_fast(), self.fast.len())
    }

    pub fn is_finite(&self) -> bool {
        self.slow.iter().chain(self.fast.iter()).all(|v| v.is_finite())
    }

    /// Packs into `[slow; fast]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.slow.len() + self.fast.len());
        v.extend_from_slice(&self.slow);
        v.extend_from_slice(&self.fast);
        v
    }

    pub fn from_flat(p: &L96Params, flat: &[f64]) -> Result<Self> {
        check_dim("FullState flat", p.n_x + p.n_fast(), flat.len())?;
        Ok(Self {
            slow: flat[..p.n_x].to_vec(),
            fast: flat[p.n_x..].to_vec(),
        })
    }

    pub fn slow_vector(&self) -> StateVector {
        DVector::from_column_slice(&self.slow)
    }
}

#[inline]
fn wrap_prev(k: usize, n: usize) -> usize {
    if k == 0 {
        n - 1
    } else {
        k - 1
    }
}

/// Single-scale tendency written into `out`.
pub fn single_tendency_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    debug_assert_eq!(n, out.len());
    for k in 0..n {
        let km1 = wrap_prev(k, n);
        let km2 = wrap_prev(km1, n);
        let kp1 = if k + 1 == n { 0 } else { k + 1 };
        out[k] = -x[km1] * (x[km2] - x[kp1]) - x[k] + forcing;
    }
}

/// `dX_k/dt = -X_{k-1}(X_{k-2} - X_{k+1}) - X_k + F` with periodic wrap.
pub fn tendency_single(x: &[f64], forcing: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    single_tendency_into(x, forcing, &mut out);
    out
}

/// Multi-scale tendency on a packed `[slow; fast]` vector.
pub fn multiscale_tendency_into(p: &L96Params, state: &[f64], out: &mut [f64]) {
    let n_x = p.n_x;
    let n_z = p.n_z;
    let (slow, fast) = state.split_at(n_x);
    let (dslow, dfast) = out.split_at_mut(n_x);

    single_tendency_into(slow, p.forcing, dslow);
    let coupling = p.h_x / n_z as f64;
    for k in 0..n_x {
        let col = &fast[k * n_z..(k + 1) * n_z];
        dslow[k] += coupling * col.iter().sum::<f64>();
    }

    let total = fast.len();
    let inv_xi = 1.0 / p.xi;
    let fast_term = |m: usize| -> f64 {
        let mp1 = if m + 1 >= total { m + 1 - total } else { m + 1 };
        let mp2 = if m + 2 >= total { m + 2 - total } else { m + 2 };
        let mm1 = if m == 0 { total - 1 } else { m - 1 };
        -fast[mp1] * (fast[mp2] - fast[mm1]) - fast[m]
    };
    for k in 0..n_x {
        let forcing = p.h_z * slow[k];
        let base = k * n_z;
        if k == 0 || k + 1 == n_x {
            for l in 0..n_z {
                let m = base + l;
                dfast[m] = inv_xi * (fast_term(m) + forcing);
            }
        } else {
            // interior columns never wrap
            for l in 0..n_z {
                let m = base + l;
                dfast[m] = inv_xi
                    * (-fast[m + 1] * (fast[m + 2] - fast[m - 1]) - fast[m] + forcing);
            }
        }
    }
}

pub fn tendency_multiscale(s: &FullState, p: &L96Params) -> Result<FullState> {
    s.check(p)?;
    let flat = s.to_flat();
    let mut out = vec![0.0; flat.len()];
    multiscale_tendency_into(p, &flat, &mut out);
    FullState::from_flat(p, &out)
}

/// `U_k = (h_x / L) sum_l Z_{l,k}`.
pub fn subgrid_tendency(s: &FullState, p: &L96Params) -> Result<Vec<f64>> {
    s.check(p)?;
    let coupling = p.h_x / p.n_z as f64;
    Ok(s
        .fast
        .chunks_exact(p.n_z)
        .map(|col| coupling * col.iter().sum::<f64>())
        .collect())
}

/// Integrates the coupled system and returns the state every
/// `steps_per_obs` steps, after discarding `transient_steps`.
///
/// The returned sequence has `n_records` entries; the first is the state
/// right after the transient.
pub fn multiscale_trajectory(
    p: &L96Params,
    s0: &FullState,
    dt: f64,
    transient_steps: usize,
    steps_per_obs: usize,
    n_records: usize,
) -> Result<Vec<FullState>> {
    p.validate()?;
    s0.check(p)?;
    let mut x = s0.to_flat();
    let mut rk = Rk4::new(x.len());
    let f = |s: &[f64], out: &mut [f64]| multiscale_tendency_into(p, s, out);
    rk.advance(f, &mut x, dt, transient_steps)?;
    let mut out = Vec::with_capacity(n_records);
    for r in 0..n_records {
        if r > 0 {
            rk.advance(f, &mut x, dt, steps_per_obs)
                .map_err(|e| offset_step(e, transient_steps + (r - 1) * steps_per_obs))?;
        }
        out.push(FullState::from_flat(p, &x)?);
    }
    Ok(out)
}

/// Like [`multiscale_trajectory`] but keeps only the slow variables of each
/// record, plus the full state at the last record so that a later segment
/// can continue from it.
pub fn multiscale_slow_trajectory(
    p: &L96Params,
    s0: &FullState,
    dt: f64,
    transient_steps: usize,
    steps_per_obs: usize,
    n_records: usize,
) -> Result<(Vec<StateVector>, FullState)> {
    p.validate()?;
    s0.check(p)?;
    let mut x = s0.to_flat();
    let mut rk = Rk4::new(x.len());
    let f = |s: &[f64], out: &mut [f64]| multiscale_tendency_into(p, s, out);
    rk.advance(f, &mut x, dt, transient_steps)?;
    let mut out = Vec::with_capacity(n_records);
    for r in 0..n_records {
        if r > 0 {
            rk.advance(f, &mut x, dt, steps_per_obs)
                .map_err(|e| offset_step(e, transient_steps + (r - 1) * steps_per_obs))?;
        }
        out.push(DVector::from_column_slice(&x[..p.n_x]));
    }
    Ok((out, FullState::from_flat(p, &x)?))
}

fn offset_step(e: Error, offset: usize) -> Error {
    match e {
        Error::IntegrationBlowup { step } => Error::IntegrationBlowup {
            step: step + offset,
        },
        other => other,
    }
}

/// Number of model steps covering `mtu` model time units.
pub fn steps_for(mtu: f64, dt: f64) -> Result<usize> {
    let steps = mtu / dt;
    let rounded = steps.round();
    if (steps - rounded).abs() > 1e-6 * rounded.max(1.0) {
        return Err(Error::Config(format!(
            "{mtu} MTU is not an integer number of steps of {dt}"
        )));
    }
    Ok(rounded as usize)
}

/// Coarse forecast model: the single-scale system integrated over one
/// observation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleScaleModel {
    pub n_x: usize,
    pub forcing: f64,
    pub dt: f64,
    pub steps_per_interval: usize,
}

impl SingleScaleModel {
    pub fn new(n_x: usize, forcing: f64, dt: f64, steps_per_interval: usize) -> Self {
        Self {
            n_x,
            forcing,
            dt,
            steps_per_interval,
        }
    }
}

impl ForecastModel for SingleScaleModel {
    fn dim(&self) -> usize {
        self.n_x
    }

    fn advance(&self, x: &mut [f64]) -> Result<()> {
        check_dim("single-scale state", self.n_x, x.len())?;
        let mut rk = Rk4::new(self.n_x);
        let forcing = self.forcing;
        rk.advance(
            |s: &[f64], out: &mut [f64]| single_tendency_into(s, forcing, out),
            x,
            self.dt,
            self.steps_per_interval,
        )
    }
}

/// `eta_j = x_j - M(x_{j-1})` for consecutive truth states.
pub fn true_additive_errors<M: ForecastModel + ?Sized>(
    truth_slow: &[StateVector],
    model: &M,
) -> Result<Vec<StateVector>> {
    if truth_slow.len() < 2 {
        return Err(Error::Config(
            "true_additive_errors needs at least two truth states".into(),
        ));
    }
    truth_slow
        .windows(2)
        .map(|pair| {
            let predicted = model.forecast(&pair[0])?;
            Ok(&pair[1] - predicted)
        })
        .collect()
}
