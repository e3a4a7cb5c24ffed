//! Small explicit games: fixed kernels and rewards, optionally with a
//! crowd-aversion term `-c · L_h(s)` in the reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mfg::{repeat_index, Dims, EnvModel, Stage};
use crate::params::ParamLayout;

#[derive(Clone, Debug)]
pub struct TabularGame {
    dims: Dims,
    mu0: Vec<f64>,
    /// Per round, `S * A * S`.
    kernels: Vec<Vec<f64>>,
    /// Per round, `S * A`.
    rewards: Vec<Vec<f64>>,
    crowd_aversion: f64,
    /// Per round weights of the linear objective `Σ_h ⟨w_h, L_h⟩`.
    objective_weights: Vec<Vec<f64>>,
}

impl TabularGame {
    pub fn new(
        dims: Dims,
        mu0: Vec<f64>,
        kernels: Vec<Vec<f64>>,
        rewards: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if mu0.len() != dims.states
            || kernels.len() != dims.horizon
            || rewards.len() != dims.horizon
            || kernels.iter().any(|k| k.len() != dims.slab() * dims.states)
            || rewards.iter().any(|r| r.len() != dims.slab())
        {
            return Err(Error::Shape("tabular game arrays do not match dims".into()));
        }
        Ok(Self {
            objective_weights: vec![vec![1.0; dims.slab()]; dims.horizon],
            dims,
            mu0,
            kernels,
            rewards,
            crowd_aversion: 0.0,
        })
    }

    /// Same kernel and reward at every round.
    pub fn stationary(
        dims: Dims,
        mu0: Vec<f64>,
        kernel: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        Self::new(
            dims,
            mu0,
            vec![kernel; dims.horizon],
            vec![reward; dims.horizon],
        )
    }

    /// Random kernels and rewards in `[0, 1)`.
    pub fn random(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dist = |n: usize| {
            let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.05).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect::<Vec<_>>()
        };
        let mu0 = dist(dims.states);
        let kernels = (0..dims.horizon)
            .map(|_| (0..dims.slab()).flat_map(|_| dist(dims.states)).collect())
            .collect();
        let rewards = (0..dims.horizon)
            .map(|_| (0..dims.slab()).map(|_| rng.gen::<f64>()).collect())
            .collect();
        Self::new(dims, mu0, kernels, rewards).expect("consistent shapes")
    }

    pub fn with_crowd_aversion(mut self, c: f64) -> Self {
        self.crowd_aversion = c;
        self
    }

    pub fn with_objective_weights(mut self, weights: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != self.dims.horizon || weights.iter().any(|w| w.len() != self.dims.slab())
        {
            return Err(Error::Shape("objective weights".into()));
        }
        self.objective_weights = weights;
        Ok(self)
    }

    pub fn kernel(&self, h: usize) -> &[f64] {
        &self.kernels[h]
    }

    pub fn base_reward(&self, h: usize) -> &[f64] {
        &self.rewards[h]
    }

    pub fn crowd_aversion(&self) -> f64 {
        self.crowd_aversion
    }
}

impl EnvModel for TabularGame {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn initial_distribution(&self) -> &[f64] {
        &self.mu0
    }

    fn param_layout(&self) -> ParamLayout {
        ParamLayout::new()
    }

    fn stage(&self, tape: &mut Tape, h: usize, _theta: Var, dist: Var, _carry: &[Var]) -> Result<Stage> {
        let kernel = tape.constant(self.kernels[h].clone());
        let base = tape.constant(self.rewards[h].clone());
        let reward = if self.crowd_aversion != 0.0 {
            let marginal = tape.sum_rows(dist, self.dims.actions)?;
            let spread = tape.gather(marginal, repeat_index(self.dims.states, self.dims.actions))?;
            let crowd = tape.scale(spread, self.crowd_aversion)?;
            tape.sub(base, crowd)?
        } else {
            base
        };
        Ok(Stage {
            kernel,
            reward,
            carry: Vec::new(),
        })
    }

    fn objective(&self, tape: &mut Tape, _theta: Var, flow: &[Var]) -> Result<Var> {
        let mut terms = Vec::with_capacity(flow.len());
        for (w, &l) in self.objective_weights.iter().zip(flow) {
            let w = tape.constant(w.clone());
            let wl = tape.mul(w, l)?;
            terms.push(tape.sum(wl)?);
        }
        let all = tape.concat(&terms)?;
        Ok(tape.sum(all)?)
    }
}
