//! Forecast operators `M` mapping a state over one observation interval.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result};

pub trait ForecastModel: Sync {
    fn dim(&self) -> usize;

    /// Advances `x` by one observation interval in place.
    fn advance(&self, x: &mut [f64]) -> Result<()>;

    fn forecast(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = x.clone();
        self.advance(out.as_mut_slice())?;
        Ok(out)
    }
}

impl<M: ForecastModel + ?Sized> ForecastModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn advance(&self, x: &mut [f64]) -> Result<()> {
        (**self).advance(x)
    }
}

/// Affine model `x -> A x + b`; used for linear-Gaussian checks.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols());
        assert_eq!(a.nrows(), b.len());
        Self { a, b }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n), DVector::zeros(n))
    }
}

impl ForecastModel for LinearModel {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn advance(&self, x: &mut [f64]) -> Result<()> {
        check_dim("linear model state", self.b.len(), x.len())?;
        let v = &self.a * DVector::from_column_slice(x) + &self.b;
        x.copy_from_slice(v.as_slice());
        Ok(())
    }
}
