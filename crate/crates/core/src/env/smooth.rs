//! Random game whose kernels, rewards and objective are smooth in both the
//! design parameter and the population. Used to validate gradients.
//!
//! ```text
//! P_h(·|s,a) = softmax(B_h[s,a] + M_h[s,a] θ + E_h[s,a] μ_h)
//! R_h(s,a)   = sigmoid(c_h[s,a] + N_h[s,a] θ + F_h[s,a] μ_h)
//! g(θ, L)    = Σ_h ⟨w_h, L_h⟩ − ½ Σ_h ‖μ_h‖² + ⟨b, sigmoid(θ)⟩
//! ```
//! where `μ_h` is the state marginal of `L_h`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::mfg::{Dims, EnvModel, Stage};
use crate::params::ParamLayout;

#[derive(Clone, Debug)]
struct Round {
    kernel_base: Vec<f64>,
    kernel_theta: Vec<f64>,
    kernel_pop: Vec<f64>,
    reward_base: Vec<f64>,
    reward_theta: Vec<f64>,
    reward_pop: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SmoothGame {
    dims: Dims,
    param_dim: usize,
    mu0: Vec<f64>,
    rounds: Vec<Round>,
    objective_theta: Vec<f64>,
    ignores_theta: bool,
}

impl SmoothGame {
    pub fn random(dims: Dims, param_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z })
                .collect::<Vec<f64>>()
        };
        let (s, slab) = (dims.states, dims.slab());
        let mu_logits = normal(s, 0.5);
        let z: f64 = mu_logits.iter().map(|v| v.exp()).sum();
        let mu0 = mu_logits.iter().map(|v| v.exp() / z).collect();
        let rounds = (0..dims.horizon)
            .map(|_| Round {
                kernel_base: normal(slab * s, 1.0),
                kernel_theta: normal(slab * s * param_dim, 0.5),
                kernel_pop: normal(slab * s * s, 1.0),
                reward_base: normal(slab, 1.0),
                reward_theta: normal(slab * param_dim, 0.5),
                reward_pop: normal(slab * s, 1.0),
                weights: normal(slab, 1.0),
            })
            .collect();
        let objective_theta = normal(param_dim, 0.3);
        Self {
            dims,
            param_dim,
            mu0,
            rounds,
            objective_theta,
            ignores_theta: false,
        }
    }

    /// Drops every dependence on `θ`.
    pub fn ignoring_theta(mut self) -> Self {
        self.ignores_theta = true;
        self
    }

    fn marginal(&self, tape: &mut Tape, dist: Var) -> Result<Var> {
        Ok(tape.sum_rows(dist, self.dims.actions)?)
    }
}

impl EnvModel for SmoothGame {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn initial_distribution(&self) -> &[f64] {
        &self.mu0
    }

    fn param_layout(&self) -> ParamLayout {
        ParamLayout::new().with("theta", &[self.param_dim])
    }

    fn stage(&self, tape: &mut Tape, h: usize, theta: Var, dist: Var, _carry: &[Var]) -> Result<Stage> {
        let r = &self.rounds[h];
        let (s, slab, d) = (self.dims.states, self.dims.slab(), self.param_dim);
        let mu = self.marginal(tape, dist)?;

        let kb = tape.constant(r.kernel_base.clone());
        let kp = tape.constant(r.kernel_pop.clone());
        let pop = tape.matvec(kp, mu, slab * s, s, false)?;
        let mut logits = tape.add(kb, pop)?;
        if !self.ignores_theta {
            let kt = tape.constant(r.kernel_theta.clone());
            let th = tape.matvec(kt, theta, slab * s, d, false)?;
            logits = tape.add(logits, th)?;
        }
        let kernel = tape.softmax_rows(logits, s)?;

        let rb = tape.constant(r.reward_base.clone());
        let rp = tape.constant(r.reward_pop.clone());
        let pop = tape.matvec(rp, mu, slab, s, false)?;
        let mut pre = tape.add(rb, pop)?;
        if !self.ignores_theta {
            let rt = tape.constant(r.reward_theta.clone());
            let th = tape.matvec(rt, theta, slab, d, false)?;
            pre = tape.add(pre, th)?;
        }
        let reward = tape.sigmoid(pre)?;
        Ok(Stage {
            kernel,
            reward,
            carry: Vec::new(),
        })
    }

    fn objective(&self, tape: &mut Tape, theta: Var, flow: &[Var]) -> Result<Var> {
        let mut terms = Vec::new();
        for (r, &l) in self.rounds.iter().zip(flow) {
            let w = tape.constant(r.weights.clone());
            let wl = tape.mul(w, l)?;
            terms.push(tape.sum(wl)?);
            let mu = self.marginal(tape, l)?;
            let sq = tape.mul(mu, mu)?;
            let sq = tape.sum(sq)?;
            terms.push(tape.scale(sq, -0.5)?);
        }
        if !self.ignores_theta {
            let b = tape.constant(self.objective_theta.clone());
            let sig = tape.sigmoid(theta)?;
            let bt = tape.mul(b, sig)?;
            terms.push(tape.sum(bt)?);
        }
        let all = tape.concat(&terms)?;
        Ok(tape.sum(all)?)
    }
}
