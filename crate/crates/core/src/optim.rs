//! Outer-loop optimizers over θ. Everything ascends: objectives are
//! maximized.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Adam { lr, .. } | OptimizerKind::Sgd { lr } => lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, dim: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One ascent step `θ ← θ + lr·direction`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != grad.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer over {} coordinates got θ of {} and a gradient of {}",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                for (t, g) in theta.iter_mut().zip(grad) {
                    *t += lr * g;
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for i in 0..theta.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    theta[i] += lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} evaluated to {v}")))
    }
}

/// Uniform direction on the unit sphere of dimension `dim`.
pub fn sphere_direction(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return z.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `(G(θ+uz) − G(θ−uz))/(2u)·D·z` for a given direction `z`.
pub fn zeroth_order_grad_along(
    mut g: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    u: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    if !(u > 0.0) {
        return Err(Error::Config(format!("smoothing radius must be positive, got {u}")));
    }
    let plus: Vec<f64> = theta.iter().zip(z).map(|(t, d)| t + u * d).collect();
    let minus: Vec<f64> = theta.iter().zip(z).map(|(t, d)| t - u * d).collect();
    let gp = finite(g(&plus)?, "objective at θ+uz")?;
    let gm = finite(g(&minus)?, "objective at θ−uz")?;
    let scale = (gp - gm) / (2.0 * u) * theta.len() as f64;
    Ok(z.iter().map(|d| scale * d).collect())
}

/// Two-point estimator with `z` uniform on the sphere.
pub fn zeroth_order_grad(
    g: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    u: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let z = sphere_direction(theta.len(), rng);
    zeroth_order_grad_along(g, theta, u, &z)
}

/// Best of `θ, θ+σn, θ−σn` with its value; ties keep `θ`. `current` is
/// `G(θ)` when already known.
pub fn anneal_step_along(
    mut g: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    current: Option<f64>,
    sigma: f64,
    n: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("perturbation scale must be positive, got {sigma}")));
    }
    let g0 = match current {
        Some(v) => v,
        None => finite(g(theta)?, "objective at θ")?,
    };
    let mut best = (theta.to_vec(), g0);
    for sign in [1.0, -1.0] {
        let cand: Vec<f64> = theta.iter().zip(n).map(|(t, d)| t + sign * sigma * d).collect();
        let v = finite(g(&cand)?, "objective at a perturbation")?;
        if v > best.1 {
            best = (cand, v);
        }
    }
    Ok(best)
}

/// [`anneal_step_along`] with a standard normal perturbation.
pub fn anneal_step(
    g: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    current: Option<f64>,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, f64)> {
    let n: Vec<f64> = (0..theta.len()).map(|_| rng.sample(StandardNormal)).collect();
    anneal_step_along(g, theta, current, sigma, &n)
}
