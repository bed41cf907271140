//! Classical fixed-step fourth-order Runge-Kutta.

use crate::error::{Error, Result};

/// Reusable RK4 workspace for states of a fixed dimension.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// One step of size `dt`, in place.
    pub fn step<F>(&mut self, mut f: F, x: &mut [f64], dt: f64)
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let half = 0.5 * dt;
        f(x, &mut self.k1);
        for ((t, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k1) {
            *t = xi + half * k;
        }
        f(&self.tmp, &mut self.k2);
        for ((t, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k2) {
            *t = xi + half * k;
        }
        f(&self.tmp, &mut self.k3);
        for ((t, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k3) {
            *t = xi + dt * k;
        }
        f(&self.tmp, &mut self.k4);
        let sixth = dt / 6.0;
        for i in 0..x.len() {
            x[i] += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }

    /// `n_steps` steps in place. Fails with the (1-based) index of the first
    /// step that produced a non-finite state.
    pub fn advance<F>(&mut self, mut f: F, x: &mut [f64], dt: f64, n_steps: usize) -> Result<()>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        for step in 1..=n_steps {
            self.step(&mut f, x, dt);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::IntegrationBlowup { step });
            }
        }
        Ok(())
    }
}

/// Integrates `dx/dt = f(x)` and returns all `n_steps + 1` states starting
/// with `s0`.
pub fn rk4_integrate<F>(f: F, s0: &[f64], dt: f64, n_steps: usize) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if !(dt > 0.0) || n_steps == 0 {
        return Err(Error::Config(format!(
            "rk4 needs dt > 0 and n_steps >= 1 (dt = {dt}, n_steps = {n_steps})"
        )));
    }
    let mut f = f;
    let mut rk = Rk4::new(s0.len());
    let mut x = s0.to_vec();
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(x.clone());
    for step in 1..=n_steps {
        rk.step(&mut f, &mut x, dt);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationBlowup { step });
        }
        out.push(x.clone());
    }
    Ok(out)
}
