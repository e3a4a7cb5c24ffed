//! Run configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use amid_core::adjoint::Checkpointing;
use amid_core::design::{Estimator, SolverConfig, TrainConfig};
use amid_core::env::auction::{AuctionObjective, Dynamics, Utility};
use amid_core::env::{AuctionConfig, AuctionEnv, BeachBar, BeachBarConfig, SmoothGame};
use amid_core::mechanism::{FirstPrice, Mechanism, NeuralMechanism, StaticMechanism};
use amid_core::mfg::{Dims, EnvModel};
use amid_core::optim::OptimizerKind;
use amid_core::params::read_params;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub environment: EnvironmentBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub optimizer: OptimizerBlock,
    #[serde(default)]
    pub training: TrainingBlock,
    #[serde(default)]
    pub study: Option<StudyBlock>,
    #[serde(default)]
    pub gradcheck: GradcheckBlock,
    /// Initial θ as a parameter file; defaults depend on the environment.
    #[serde(default)]
    pub theta: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentBlock {
    Beachbar {
        #[serde(rename = "K")]
        positions: usize,
        #[serde(rename = "H")]
        horizon: usize,
        #[serde(default = "default_p_max")]
        p_max: f64,
        #[serde(default = "one")]
        movement_sign: f64,
    },
    Auction {
        values: usize,
        bids: usize,
        horizon: usize,
        alpha_max: f64,
        #[serde(default)]
        mu0: Option<Vec<f64>>,
        #[serde(default)]
        utility: UtilityBlock,
        #[serde(default)]
        dynamics: DynamicsBlock,
        #[serde(default)]
        objective: ObjectiveBlock,
        mechanism: MechanismBlock,
    },
    Smooth {
        horizon: usize,
        states: usize,
        actions: usize,
        param_dim: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        ignore_theta: bool,
    },
}

fn default_p_max() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilityBlock {
    #[default]
    Linear,
    RiskAverse { beta: f64 },
    RiskSeeking { beta: f64 },
    Hyperbolic { lambda: f64 },
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsBlock {
    #[default]
    SingleMinded,
    GaussianDrift { rate: f64, sigma: f64 },
    Regenerate { rho: f64 },
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveBlock {
    #[default]
    Revenue,
    Efficiency,
    Mix,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MechanismBlock {
    Neural {
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default)]
        init_seed: u64,
    },
    Static,
    FirstPrice,
}

fn default_hidden() -> usize {
    256
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(rename = "T", default = "default_t")]
    pub steps: usize,
    #[serde(rename = "T_val", default = "default_t_val")]
    pub val_steps: usize,
}

fn default_eta() -> f64 {
    10.0
}
fn default_tau() -> f64 {
    1e-3
}
fn default_t() -> usize {
    400
}
fn default_t_val() -> usize {
    500
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self {
            eta: default_eta(),
            tau: default_tau(),
            steps: default_t(),
            val_steps: default_t_val(),
        }
    }
}

impl SolverBlock {
    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            eta: self.eta,
            tau: self.tau,
            steps: self.steps,
            val_steps: self.val_steps,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKindBlock {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerBlock {
    #[serde(default)]
    pub kind: OptimizerKindBlock,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_u")]
    pub u_zero: f64,
    #[serde(default = "default_sigma")]
    pub sigma_anneal: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_eps() -> f64 {
    1e-8
}
fn default_u() -> f64 {
    1e-2
}
fn default_sigma() -> f64 {
    1e-3
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        Self {
            kind: OptimizerKindBlock::Adam,
            lr: default_lr(),
            betas: default_betas(),
            eps: default_eps(),
            u_zero: default_u(),
            sigma_anneal: default_sigma(),
        }
    }
}

impl OptimizerBlock {
    pub fn kind(&self) -> OptimizerKind {
        match self.kind {
            OptimizerKindBlock::Adam => OptimizerKind::Adam {
                lr: self.lr,
                beta1: self.betas[0],
                beta2: self.betas[1],
                eps: self.eps,
            },
            OptimizerKindBlock::Sgd => OptimizerKind::Sgd { lr: self.lr },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorBlock {
    #[default]
    Amid,
    Zeroth,
    Anneal,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingBlock {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub estimator: EstimatorBlock,
    /// Checkpoint stride for the adjoint pass; `⌈√(T+1)⌉` when absent.
    #[serde(default)]
    pub checkpoint_stride: Option<usize>,
}

fn default_iterations() -> usize {
    100
}
fn default_eval_every() -> usize {
    10
}

impl Default for TrainingBlock {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            seed: 0,
            eval_every: default_eval_every(),
            estimator: EstimatorBlock::Amid,
            checkpoint_stride: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StudyBlock {
    #[serde(rename = "Ns")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Parameter file with θ.
    pub theta: Option<PathBuf>,
    /// Parameter file with the policy logits.
    pub policy: PathBuf,
}

fn default_reps() -> usize {
    200
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckBlock {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_fd_eps")]
    pub eps: f64,
}

fn default_tol() -> f64 {
    1e-5
}
fn default_fd_eps() -> f64 {
    1e-6
}

impl Default for GradcheckBlock {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            eps: default_fd_eps(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("parsing configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.solver.val_steps < self.solver.steps {
            bail!(
                "solver.T_val ({}) must be at least solver.T ({})",
                self.solver.val_steps,
                self.solver.steps
            );
        }
        self.train_config(self.training.seed).validate()?;
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let estimator = match self.training.estimator {
            EstimatorBlock::Amid => Estimator::Amid {
                checkpointing: self.training.checkpoint_stride.map(Checkpointing::Stride),
            },
            EstimatorBlock::Zeroth => Estimator::Zeroth {
                u: self.optimizer.u_zero,
            },
            EstimatorBlock::Anneal => Estimator::Anneal {
                sigma: self.optimizer.sigma_anneal,
            },
        };
        TrainConfig {
            solver: self.solver.solver(),
            estimator,
            optimizer: self.optimizer.kind(),
            iterations: self.training.iterations,
            eval_every: self.training.eval_every,
            seed,
        }
    }
}

/// A constructed environment with its default design parameter.
pub enum Environment {
    BeachBar(BeachBar),
    Auction(AuctionEnv),
    Smooth(SmoothGame),
}

impl Environment {
    pub fn build(block: &EnvironmentBlock) -> Result<(Self, Vec<f64>)> {
        Ok(match *block {
            EnvironmentBlock::Beachbar {
                positions,
                horizon,
                p_max,
                movement_sign,
            } => {
                let cfg = BeachBarConfig {
                    positions,
                    horizon,
                    p_max,
                    movement_sign,
                };
                (Environment::BeachBar(BeachBar::new(cfg)?), vec![0.0; positions])
            }
            EnvironmentBlock::Auction {
                values,
                bids,
                horizon,
                alpha_max,
                ref mu0,
                utility,
                dynamics,
                objective,
                mechanism,
            } => {
                let mut cfg = AuctionConfig::single_minded(values, bids, horizon, alpha_max);
                if let Some(mu0) = mu0 {
                    cfg.mu0 = mu0.clone();
                }
                cfg.utility = match utility {
                    UtilityBlock::Linear => Utility::Linear,
                    UtilityBlock::RiskAverse { beta } => Utility::RiskAverse { beta },
                    UtilityBlock::RiskSeeking { beta } => Utility::RiskSeeking { beta },
                    UtilityBlock::Hyperbolic { lambda } => Utility::Hyperbolic { lambda },
                };
                cfg.dynamics = match dynamics {
                    DynamicsBlock::SingleMinded => Dynamics::SingleMinded,
                    DynamicsBlock::GaussianDrift { rate, sigma } => Dynamics::GaussianDrift { rate, sigma },
                    DynamicsBlock::Regenerate { rho } => Dynamics::Regenerate { rho },
                };
                cfg.objective = match objective {
                    ObjectiveBlock::Revenue => AuctionObjective::Revenue,
                    ObjectiveBlock::Efficiency => AuctionObjective::Efficiency,
                    ObjectiveBlock::Mix => AuctionObjective::Mix,
                };
                let (mech, theta): (Arc<dyn Mechanism>, Vec<f64>) = match mechanism {
                    MechanismBlock::Neural { hidden, init_seed } => {
                        let m = NeuralMechanism::new(horizon, bids, hidden)?;
                        let theta = m.init_params(init_seed);
                        (Arc::new(m), theta)
                    }
                    MechanismBlock::Static => {
                        let m = StaticMechanism::new(horizon, bids, alpha_max);
                        let n = m.param_layout().len();
                        (Arc::new(m), vec![0.0; n])
                    }
                    MechanismBlock::FirstPrice => (Arc::new(FirstPrice::new(horizon, bids, alpha_max)), Vec::new()),
                };
                (Environment::Auction(AuctionEnv::new(cfg, mech)?), theta)
            }
            EnvironmentBlock::Smooth {
                horizon,
                states,
                actions,
                param_dim,
                seed,
                ignore_theta,
            } => {
                let mut g = SmoothGame::random(Dims::new(horizon, states, actions), param_dim, seed);
                if ignore_theta {
                    g = g.ignoring_theta();
                }
                (Environment::Smooth(g), vec![0.0; param_dim])
            }
        })
    }

    pub fn model(&self) -> &dyn EnvModel {
        match self {
            Environment::BeachBar(e) => e,
            Environment::Auction(e) => e,
            Environment::Smooth(e) => e,
        }
    }
}

/// Reads θ from a parameter file and checks it against the environment.
pub fn load_theta(path: &Path, env: &dyn EnvModel) -> Result<Vec<f64>> {
    let (_, values) = read_params(path).with_context(|| format!("reading θ from {}", path.display()))?;
    if values.len() != env.param_len() {
        bail!(
            "{} holds {} parameters, the environment expects {}",
            path.display(),
            values.len(),
            env.param_len()
        );
    }
    Ok(values)
}
