//! Outer training loop: estimate a design gradient, step θ, and track the
//! validation objective and exploitability.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{amid_gradient, t_step_objective, AdjointConfig, Checkpointing};
use crate::error::{Error, Result};
use crate::mfg::{exploitability, omd_iterate, softmax_policy, EnvModel, LogPolicy};
use crate::optim::{anneal_step, zeroth_order_grad, Optimizer, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub eta: f64,
    pub tau: f64,
    /// OMD steps inside the training objective.
    pub steps: usize,
    /// OMD steps for evaluation.
    pub val_steps: usize,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        crate::mfg::check_step(self.eta, self.tau)?;
        if self.val_steps < self.steps {
            return Err(Error::Config(format!(
                "validation steps {} below training steps {}",
                self.val_steps, self.steps
            )));
        }
        Ok(())
    }

    pub fn adjoint(&self) -> AdjointConfig {
        AdjointConfig::new(self.steps, self.eta, self.tau)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Estimator {
    Amid { checkpointing: Option<Checkpointing> },
    /// Two-point estimator with smoothing radius `u`.
    Zeroth { u: f64 },
    /// Random-perturbation search; the optimizer is unused.
    Anneal { sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub solver: SolverConfig,
    pub estimator: Estimator,
    pub optimizer: OptimizerKind,
    pub iterations: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(solver: SolverConfig, estimator: Estimator, optimizer: OptimizerKind, iterations: usize) -> Self {
        Self {
            solver,
            estimator,
            optimizer,
            iterations,
            eval_every: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        match self.estimator {
            Estimator::Zeroth { u } if !(u > 0.0) => {
                Err(Error::Config(format!("smoothing radius must be positive, got {u}")))
            }
            Estimator::Anneal { sigma } if !(sigma > 0.0) => {
                Err(Error::Config(format!("perturbation scale must be positive, got {sigma}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub iter: usize,
    pub objective: f64,
    pub exploitability: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub objective: f64,
    pub exploitability: f64,
    /// `F^{(T_val)}(θ, 0)`.
    pub logits: LogPolicy,
}

/// Objective and exploitability of the OMD iterate after `val_steps` steps
/// from uniform logits.
pub fn evaluate<E: EnvModel + ?Sized>(env: &E, theta: &[f64], solver: &SolverConfig) -> Result<Evaluation> {
    let zeta0 = LogPolicy::zeros(env.dims());
    let logits = omd_iterate(env, theta, &zeta0, solver.eta, solver.tau, solver.val_steps)?;
    let objective = t_step_objective(env, theta, &logits, &AdjointConfig::new(0, solver.eta, solver.tau))?;
    let policy = softmax_policy(&logits)?;
    let expl = exploitability(env, theta, &policy, solver.tau)?;
    if !objective.is_finite() || !expl.is_finite() {
        return Err(Error::NonFinite(format!(
            "evaluation gave objective {objective} and exploitability {expl}"
        )));
    }
    Ok(Evaluation {
        objective,
        exploitability: expl,
        logits,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub theta: Vec<f64>,
    pub curve: Vec<CurveRow>,
    /// Set when training stopped early; `theta` and `curve` hold what was
    /// reached before.
    pub failure: Option<Error>,
}

/// Runs `cfg.iterations` updates from `theta0`, evaluating at iteration 0,
/// every `eval_every` iterations and at the end. `on_row` sees each row as
/// it is produced.
pub fn train<E: EnvModel + ?Sized>(
    env: &E,
    theta0: &[f64],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&CurveRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if theta0.len() != env.param_len() {
        return Err(Error::Shape(format!(
            "environment expects {} parameters, got {}",
            env.param_len(),
            theta0.len()
        )));
    }
    let mut theta = theta0.to_vec();
    let mut curve = Vec::new();
    let mut push = |iter: usize, theta: &[f64], curve: &mut Vec<CurveRow>| -> Result<()> {
        let ev = evaluate(env, theta, &cfg.solver)?;
        let row = CurveRow {
            iter,
            objective: ev.objective,
            exploitability: ev.exploitability,
        };
        on_row(&row);
        curve.push(row);
        Ok(())
    };
    push(0, &theta, &mut curve)?;

    let zeta0 = LogPolicy::zeros(env.dims());
    let mut adj = cfg.solver.adjoint();
    if let Estimator::Amid { checkpointing: Some(c) } = cfg.estimator {
        adj = adj.with_checkpointing(c);
    }
    let mut opt = Optimizer::new(cfg.optimizer, theta.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current: Option<f64> = None;
    let objective = |th: &[f64]| t_step_objective(env, th, &zeta0, &adj);

    for it in 1..=cfg.iterations {
        let stepped: Result<()> = (|| {
            match cfg.estimator {
                Estimator::Amid { .. } => {
                    let res = amid_gradient(env, &theta, &zeta0, &adj)?;
                    if !res.objective_value.is_finite() {
                        return Err(Error::NonFinite(format!("objective {}", res.objective_value)));
                    }
                    opt.step(&mut theta, &res.grad_theta)
                }
                Estimator::Zeroth { u } => {
                    let g = zeroth_order_grad(objective, &theta, u, &mut rng)?;
                    opt.step(&mut theta, &g)
                }
                Estimator::Anneal { sigma } => {
                    let (next, value) = anneal_step(objective, &theta, current, sigma, &mut rng)?;
                    theta = next;
                    current = Some(value);
                    Ok(())
                }
            }
        })();
        let evaluated = stepped.and_then(|()| {
            if it % cfg.eval_every == 0 || it == cfg.iterations {
                push(it, &theta, &mut curve)
            } else {
                Ok(())
            }
        });
        if let Err(e) = evaluated {
            log::error!("training stopped at iteration {it}: {e}");
            return Ok(TrainOutcome {
                theta,
                curve,
                failure: Some(e),
            });
        }
    }
    Ok(TrainOutcome {
        theta,
        curve,
        failure: None,
    })
}
