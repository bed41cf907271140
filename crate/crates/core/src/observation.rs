//! Partial observation operator, its complement, and synthetic observations.
//!
//! Indices are 1-based at the serialization boundary (config files, CSV
//! headers) and 0-based everywhere inside the crate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::l96::StateVector;

/// Selection of observed slow variables. `H` picks `observed` rows of the
/// identity; `H_perp` picks the remaining indices in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationOperator {
    observed: Vec<usize>,
    unobserved: Vec<usize>,
    n_x: usize,
}

impl ObservationOperator {
    /// `indices` are 0-based; they are sorted and must be distinct.
    pub fn new(indices: &[usize], n_x: usize) -> Result<Self> {
        let mut observed = indices.to_vec();
        observed.sort_unstable();
        if observed.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("observed indices must be distinct".into()));
        }
        if let Some(&bad) = observed.iter().find(|&&i| i >= n_x) {
            return Err(Error::Config(format!(
                "observed index {} outside 1..={n_x}",
                bad + 1
            )));
        }
        if observed.is_empty() {
            return Err(Error::Config("at least one variable must be observed".into()));
        }
        let unobserved = (0..n_x).filter(|i| observed.binary_search(i).is_err()).collect();
        Ok(Self {
            observed,
            unobserved,
            n_x,
        })
    }

    /// Builds from 1-based indices as written in configs.
    pub fn from_one_based(indices: &[usize], n_x: usize) -> Result<Self> {
        if indices.contains(&0) {
            return Err(Error::Config("observed indices are 1-based".into()));
        }
        let zero: Vec<usize> = indices.iter().map(|i| i - 1).collect();
        Self::new(&zero, n_x)
    }

    /// Partial observation: rejects `n_y == n_x`.
    pub fn new_partial(indices: &[usize], n_x: usize) -> Result<Self> {
        let h = Self::new(indices, n_x)?;
        if h.n_y() >= n_x {
            return Err(Error::Config("observation must be partial (n_y < n_x)".into()));
        }
        Ok(h)
    }

    pub fn full(n_x: usize) -> Self {
        Self {
            observed: (0..n_x).collect(),
            unobserved: Vec::new(),
            n_x,
        }
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.observed.len()
    }

    pub fn n_u(&self) -> usize {
        self.unobserved.len()
    }

    pub fn observed_indices(&self) -> &[usize] {
        &self.observed
    }

    pub fn unobserved_indices(&self) -> &[usize] {
        &self.unobserved
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.observed.iter().map(|i| i + 1).collect()
    }

    pub fn is_observed(&self, k: usize) -> bool {
        self.observed.binary_search(&k).is_ok()
    }

    /// `H x`.
    pub fn observe(&self, x: &[f64]) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.n_x);
        DVector::from_iterator(self.observed.len(), self.observed.iter().map(|&i| x[i]))
    }

    /// `H_perp x`.
    pub fn complement(&self, x: &[f64]) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.n_x);
        DVector::from_iterator(self.unobserved.len(), self.unobserved.iter().map(|&i| x[i]))
    }

    /// `H^T eta_o + H_perp^T eta_u`.
    pub fn lift(&self, eta_obs: &[f64], eta_unobs: &[f64]) -> Result<StateVector> {
        check_dim("lift observed part", self.n_y(), eta_obs.len())?;
        check_dim("lift unobserved part", self.n_u(), eta_unobs.len())?;
        let mut out = DVector::zeros(self.n_x);
        for (&i, &v) in self.observed.iter().zip(eta_obs) {
            out[i] = v;
        }
        for (&i, &v) in self.unobserved.iter().zip(eta_unobs) {
            out[i] = v;
        }
        Ok(out)
    }

    pub fn h_matrix(&self) -> DMatrix<f64> {
        selection_matrix(&self.observed, self.n_x)
    }

    pub fn h_perp_matrix(&self) -> DMatrix<f64> {
        selection_matrix(&self.unobserved, self.n_x)
    }
}

fn selection_matrix(rows: &[usize], n_x: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), n_x);
    for (r, &c) in rows.iter().enumerate() {
        m[(r, c)] = 1.0;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub time_index: usize,
    pub y: Vec<f64>,
}

impl ObservationRecord {
    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }
}

/// `y_j = H x_j + eps_j`, `eps_j ~ N(0, diag(r_diag))`. `truth_slow[j]` gets
/// `time_index = first_index + j`.
///
/// Zero variances are allowed and give exact observations.
pub fn synthesize_observations<R: Rng + ?Sized>(
    truth_slow: &[StateVector],
    h: &ObservationOperator,
    r_diag: &[f64],
    first_index: usize,
    rng: &mut R,
) -> Result<Vec<ObservationRecord>> {
    check_dim("observation variance", h.n_y(), r_diag.len())?;
    if r_diag.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
        return Err(Error::Config("observation variances must be finite and >= 0".into()));
    }
    let sd: Vec<f64> = r_diag.iter().map(|r| r.sqrt()).collect();
    truth_slow
        .iter()
        .enumerate()
        .map(|(j, x)| {
            check_dim("truth state", h.n_x(), x.len())?;
            let hx = h.observe(x.as_slice());
            let y = hx
                .iter()
                .zip(&sd)
                .map(|(&v, &s)| v + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Ok(ObservationRecord {
                time_index: first_index + j,
                y,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_to_nine() -> Vec<f64> {
        (1..=9).map(|v| v as f64).collect()
    }

    #[test]
    fn case_selections() {
        let h1 = ObservationOperator::from_one_based(&[3, 4, 8, 9], 9).unwrap();
        assert_eq!(h1.observe(&one_to_nine()).as_slice(), &[3.0, 4.0, 8.0, 9.0]);
        let h2 = ObservationOperator::from_one_based(&[1, 2, 5, 6], 9).unwrap();
        assert_eq!(h2.observe(&one_to_nine()).as_slice(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(h2.unobserved_indices(), &[2, 3, 6, 7, 8]);
    }

    #[test]
    fn lift_case1_bookkeeping() {
        let h = ObservationOperator::from_one_based(&[3, 4, 8, 9], 9).unwrap();
        let eta = h.lift(&[1.0; 4], &[2.0; 5]).unwrap();
        for k in 0..9 {
            let expected = if [2, 3, 7, 8].contains(&k) { 1.0 } else { 2.0 };
            assert_eq!(eta[k], expected);
        }
        assert!(h.lift(&[0.0; 4], &[0.0; 5]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn h_is_orthonormal_selection() {
        let h = ObservationOperator::from_one_based(&[1, 2, 5, 6], 9).unwrap();
        let hm = h.h_matrix();
        let hp = h.h_perp_matrix();
        assert_eq!(&hm * hm.transpose(), DMatrix::identity(4, 4));
        let stacked = DMatrix::from_fn(9, 9, |r, c| if r < 4 { hm[(r, c)] } else { hp[(r - 4, c)] });
        // a permutation matrix is orthogonal
        assert_eq!(&stacked * stacked.transpose(), DMatrix::identity(9, 9));
    }

    #[test]
    fn rejects_bad_indices() {
        assert!(ObservationOperator::from_one_based(&[0, 2], 9).is_err());
        assert!(ObservationOperator::from_one_based(&[10], 9).is_err());
        assert!(ObservationOperator::from_one_based(&[2, 2], 9).is_err());
        assert!(ObservationOperator::new_partial(&(0..9).collect::<Vec<_>>(), 9).is_err());
    }

    #[test]
    fn noise_level_matches_variance() {
        let h = ObservationOperator::from_one_based(&[3, 4, 8, 9], 9).unwrap();
        let truth: Vec<StateVector> = (0..2500).map(|_| DVector::from_vec(one_to_nine())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = synthesize_observations(&truth, &h, &[1e-6; 4], 1, &mut rng).unwrap();
        let hx = h.observe(&one_to_nine());
        let resid: Vec<f64> = obs
            .iter()
            .flat_map(|o| o.y.iter().zip(hx.iter()).map(|(a, b)| a - b).collect::<Vec<_>>())
            .collect();
        assert_eq!(resid.len(), 10_000);
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64).sqrt();
        assert!((sd - 1e-3).abs() < 0.05e-3, "sd {sd}");
        assert_eq!(obs[0].time_index, 1);
    }

    #[test]
    fn zero_noise_is_exact_and_seeded_runs_repeat() {
        let h = ObservationOperator::from_one_based(&[1, 2], 4).unwrap();
        let truth = vec![DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = synthesize_observations(&truth, &h, &[0.0, 0.0], 0, &mut rng).unwrap();
        assert!(obs.iter().all(|o| o.y == vec![1.0, 2.0]));

        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            synthesize_observations(&truth, &h, &[0.5, 0.5], 0, &mut rng).unwrap()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn noise_uncorrelated_across_components() {
        let h = ObservationOperator::full(2);
        let truth = vec![DVector::zeros(2); 20_000];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = synthesize_observations(&truth, &h, &[1.0, 1.0], 0, &mut rng).unwrap();
        let n = obs.len() as f64;
        let cross: f64 = obs.iter().map(|o| o.y[0] * o.y[1]).sum::<f64>() / n;
        let lag: f64 = obs.windows(2).map(|w| w[0].y[0] * w[1].y[0]).sum::<f64>() / n;
        assert!(cross.abs() < 4.0 / n.sqrt());
        assert!(lag.abs() < 4.0 / n.sqrt());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_then_lift_is_identity(
                x in proptest::collection::vec(-50.0f64..50.0, 9),
                mask in proptest::collection::vec(any::<bool>(), 9),
            ) {
                let idx: Vec<usize> = (0..9).filter(|&i| mask[i]).collect();
                prop_assume!(!idx.is_empty());
                let h = ObservationOperator::new(&idx, 9).unwrap();
                let o = h.observe(&x);
                let u = h.complement(&x);
                let back = h.lift(o.as_slice(), u.as_slice()).unwrap();
                prop_assert_eq!(back.as_slice(), &x[..]);
            }
        }
    }
}
