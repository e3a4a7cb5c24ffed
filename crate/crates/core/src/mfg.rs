//! Finite-horizon parameterized mean-field games.
//!
//! Arrays are flat and row-major: a policy or q-table entry `(h, s, a)` lives
//! at `(h * S + s) * A + a`, a state-action distribution entry `(s, a)` at
//! `s * A + a`, and a transition kernel entry `(s, a, s')` at
//! `(s * A + a) * S + s'`.
//!
//! The population flow, q-functions and the OMD operator are written once as
//! tape programs (`*_on_tape`). The plain entry points evaluate those programs
//! on a detached tape, so the differentiated and undifferentiated paths share
//! their arithmetic.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamLayout;

const ROW_TOL: f64 = 1e-12;
const RENORMALIZE_TOL: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub horizon: usize,
    pub states: usize,
    pub actions: usize,
}

impl Dims {
    pub fn new(horizon: usize, states: usize, actions: usize) -> Self {
        Self {
            horizon,
            states,
            actions,
        }
    }

    /// Entries of one state-action distribution.
    pub fn slab(&self) -> usize {
        self.states * self.actions
    }

    /// Entries of a policy or q-table.
    pub fn full(&self) -> usize {
        self.horizon * self.slab()
    }

    pub fn index(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.states + s) * self.actions + a
    }
}

/// Time-indexed stochastic policy `π_h(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    dims: Dims,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(dims: Dims, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != dims.full() {
            return Err(Error::Shape(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                dims.full()
            )));
        }
        for (row, chunk) in probs.chunks(dims.actions).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if chunk.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidPolicy(format!(
                    "row {row} (h={}, s={}) sums to {sum}",
                    row / dims.states,
                    row % dims.states
                )));
            }
        }
        Ok(Self { dims, probs })
    }

    pub fn uniform(dims: Dims) -> Self {
        Self {
            dims,
            probs: vec![1.0 / dims.actions as f64; dims.full()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.probs[self.dims.index(h, s, a)]
    }

    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let i = self.dims.index(h, s, 0);
        &self.probs[i..i + self.dims.actions]
    }

    /// Entrywise `π log π` with `0 log 0 = 0`.
    fn p_log_p(&self) -> Vec<f64> {
        self.probs
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .collect()
    }
}

/// Unconstrained logits `ζ` of a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct LogPolicy {
    dims: Dims,
    logits: Vec<f64>,
}

impl LogPolicy {
    pub fn new(dims: Dims, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != dims.full() {
            return Err(Error::Shape(format!(
                "logits have {} entries, expected {}",
                logits.len(),
                dims.full()
            )));
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i} is {}", logits[i])));
        }
        Ok(Self { dims, logits })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            logits: vec![0.0; dims.full()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn into_logits(self) -> Vec<f64> {
        self.logits
    }
}

/// Population flow `Λ(π)`: one state-action distribution per round.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    dims: Dims,
    dists: Vec<Vec<f64>>,
    /// Largest deviation of a propagated distribution's mass from one before
    /// renormalization.
    pub drift: f64,
}

impl Flow {
    pub fn new(dims: Dims, dists: Vec<Vec<f64>>) -> Result<Self> {
        if dists.len() != dims.horizon || dists.iter().any(|d| d.len() != dims.slab()) {
            return Err(Error::Shape("flow does not match game dimensions".into()));
        }
        Ok(Self {
            dims,
            dists,
            drift: 0.0,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn dists(&self) -> &[Vec<f64>] {
        &self.dists
    }

    pub fn at(&self, h: usize) -> &[f64] {
        &self.dists[h]
    }

    pub fn state_marginal(&self, h: usize) -> Vec<f64> {
        self.dists[h]
            .chunks(self.dims.actions)
            .map(|r| r.iter().sum())
            .collect()
    }
}

/// Regularized q-values and values along a flow.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    dims: Dims,
    pub q: Vec<f64>,
    /// `v[h * S + s]`.
    pub v: Vec<f64>,
}

impl QTable {
    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q[self.dims.index(h, s, a)]
    }

    pub fn v(&self, h: usize, s: usize) -> f64 {
        self.v[h * self.dims.states + s]
    }
}

/// Round-`h` quantities of a game at a given population distribution.
#[derive(Clone, Debug)]
pub struct Stage {
    /// `P_h(s'|s,a)`, length `S * A * S`.
    pub kernel: Var,
    /// `R_h(s,a)`, length `S * A`.
    pub reward: Var,
    /// State threaded to the next round (e.g. remaining goods).
    pub carry: Vec<Var>,
}

/// A parameterized mean-field game.
///
/// `stage` and `objective` are tape programs. Implementations must be pure:
/// the same inputs give the same outputs.
pub trait EnvModel {
    fn dims(&self) -> Dims;

    /// `μ0` over states.
    fn initial_distribution(&self) -> &[f64];

    fn param_layout(&self) -> ParamLayout;

    fn param_len(&self) -> usize {
        self.param_layout().len()
    }

    /// Carry for round 0. Most games need none.
    fn initial_carry(&self, _tape: &mut Tape, _theta: Var) -> Result<Vec<Var>> {
        Ok(Vec::new())
    }

    fn stage(&self, tape: &mut Tape, h: usize, theta: Var, dist: Var, carry: &[Var])
        -> Result<Stage>;

    /// Design objective `g(θ, L)`, a scalar node.
    fn objective(&self, tape: &mut Tape, theta: Var, flow: &[Var]) -> Result<Var>;
}

impl<E: EnvModel + ?Sized> EnvModel for &E {
    fn dims(&self) -> Dims {
        (**self).dims()
    }
    fn initial_distribution(&self) -> &[f64] {
        (**self).initial_distribution()
    }
    fn param_layout(&self) -> ParamLayout {
        (**self).param_layout()
    }
    fn param_len(&self) -> usize {
        (**self).param_len()
    }
    fn initial_carry(&self, tape: &mut Tape, theta: Var) -> Result<Vec<Var>> {
        (**self).initial_carry(tape, theta)
    }
    fn stage(
        &self,
        tape: &mut Tape,
        h: usize,
        theta: Var,
        dist: Var,
        carry: &[Var],
    ) -> Result<Stage> {
        (**self).stage(tape, h, theta, dist, carry)
    }
    fn objective(&self, tape: &mut Tape, theta: Var, flow: &[Var]) -> Result<Var> {
        (**self).objective(tape, theta, flow)
    }
}

/// Broadcast index map taking a length-`rows` vector to `rows * cols`.
pub(crate) fn repeat_index(rows: usize, cols: usize) -> Arc<[usize]> {
    (0..rows * cols).map(|i| i / cols).collect()
}

/// Tiling index map taking a length-`cols` vector to `rows * cols`.
pub(crate) fn tile_index(rows: usize, cols: usize) -> Arc<[usize]> {
    (0..rows * cols).map(|i| i % cols).collect()
}

fn check_theta<E: EnvModel + ?Sized>(env: &E, theta: &[f64]) -> Result<()> {
    if theta.len() != env.param_len() {
        return Err(Error::Shape(format!(
            "parameter vector has {} entries, game expects {}",
            theta.len(),
            env.param_len()
        )));
    }
    Ok(())
}

fn check_kernel(dims: Dims, h: usize, kernel: &[f64]) -> Result<()> {
    if kernel.len() != dims.slab() * dims.states {
        return Err(Error::Shape(format!(
            "round {h}: kernel has {} entries, expected {}",
            kernel.len(),
            dims.slab() * dims.states
        )));
    }
    for (row, chunk) in kernel.chunks(dims.states).enumerate() {
        let sum: f64 = chunk.iter().sum();
        let min = chunk.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min >= -ROW_TOL) || !((sum - 1.0).abs() <= ROW_TOL) {
            return Err(Error::KernelNotStochastic { h, row, sum, min });
        }
    }
    Ok(())
}

/// Flow and stages of a game under a policy, recorded on `tape`.
pub struct FlowVars {
    pub dists: Vec<Var>,
    pub stages: Vec<Stage>,
    pub drift: f64,
}

/// Records `Λ(π|θ)` with `L_0 = μ0·π_0` and `L_{h+1} = Γ_h(L_h, π_{h+1})`,
/// evaluating every round's stage along the way.
pub fn flow_on_tape<E: EnvModel + ?Sized>(
    env: &E,
    tape: &mut Tape,
    theta: Var,
    policy: Var,
) -> Result<FlowVars> {
    let dims = env.dims();
    let (s_n, a_n, slab) = (dims.states, dims.actions, dims.slab());
    let mu0 = env.initial_distribution();
    if mu0.len() != s_n {
        return Err(Error::Shape("initial distribution length".into()));
    }
    let spread = repeat_index(s_n, a_n);
    let mu0_b = tape.constant(spread.iter().map(|&s| mu0[s]).collect());
    let pi0 = tape.slice(policy, 0, slab)?;
    let mut dist = tape.mul(mu0_b, pi0)?;
    let mut carry = env.initial_carry(tape, theta)?;
    let mut dists = Vec::with_capacity(dims.horizon);
    let mut stages = Vec::with_capacity(dims.horizon);
    let mut drift: f64 = 0.0;
    for h in 0..dims.horizon {
        let stage = env.stage(tape, h, theta, dist, &carry)?;
        check_kernel(dims, h, tape.value(stage.kernel))?;
        if tape.size(stage.reward) != slab {
            return Err(Error::Shape(format!("round {h}: reward length")));
        }
        dists.push(dist);
        if h + 1 < dims.horizon {
            let marginal = tape.matvec(stage.kernel, dist, slab, s_n, true)?;
            let spread_m = tape.gather(marginal, spread.clone())?;
            let pi = tape.slice(policy, (h + 1) * slab, slab)?;
            let mut next = tape.mul(spread_m, pi)?;
            if let Some((index, &value)) = tape
                .value(next)
                .iter()
                .enumerate()
                .find(|(_, v)| **v < -ROW_TOL)
            {
                return Err(Error::NegativeMass {
                    h: h + 1,
                    index,
                    value,
                });
            }
            let total: f64 = tape.value(next).iter().sum();
            let dev = (total - 1.0).abs();
            if dev > RENORMALIZE_TOL {
                drift = drift.max(dev);
                let s = tape.sum(next)?;
                let one = tape.constant(vec![1.0]);
                let inv = tape.div(one, s)?;
                next = tape.scale_by(next, inv)?;
            }
            dist = next;
        }
        carry = stage.carry.clone();
        stages.push(stage);
    }
    Ok(FlowVars {
        dists,
        stages,
        drift,
    })
}

/// Evaluates every round's stage along a fixed flow (given as tape nodes).
pub fn stages_along<E: EnvModel + ?Sized>(
    env: &E,
    tape: &mut Tape,
    theta: Var,
    dists: &[Var],
) -> Result<Vec<Stage>> {
    let mut carry = env.initial_carry(tape, theta)?;
    let mut stages = Vec::with_capacity(dists.len());
    for (h, &d) in dists.iter().enumerate() {
        let stage = env.stage(tape, h, theta, d, &carry)?;
        carry = stage.carry.clone();
        stages.push(stage);
    }
    Ok(stages)
}

/// Backward recursion for `q^τ` and `V^τ`. `p_log_p` holds the entries
/// `π log π` and is ignored when `tau == 0`. Returns the concatenated q-table
/// and the per-round value vectors.
pub fn q_on_tape(
    tape: &mut Tape,
    dims: Dims,
    stages: &[Stage],
    policy: Var,
    p_log_p: Option<Var>,
    tau: f64,
) -> Result<(Var, Vec<Var>)> {
    let (s_n, a_n, slab) = (dims.states, dims.actions, dims.slab());
    let mut v_next = tape.zeros(s_n);
    let mut qs = vec![v_next; dims.horizon];
    let mut vs = vec![v_next; dims.horizon];
    for h in (0..dims.horizon).rev() {
        let stage = &stages[h];
        let q = if h + 1 < dims.horizon {
            let cont = tape.matvec(stage.kernel, v_next, slab, s_n, false)?;
            tape.add(stage.reward, cont)?
        } else {
            stage.reward
        };
        let pi = tape.slice(policy, h * slab, slab)?;
        let mut weighted = tape.mul(pi, q)?;
        if let (Some(plp), true) = (p_log_p, tau > 0.0) {
            let plp_h = tape.slice(plp, h * slab, slab)?;
            let ent = tape.scale(plp_h, tau)?;
            weighted = tape.sub(weighted, ent)?;
        }
        let v = tape.sum_rows(weighted, a_n)?;
        qs[h] = q;
        vs[h] = v;
        v_next = v;
    }
    Ok((tape.concat(&qs)?, vs))
}

/// `q^τ(·|Λ(softmax ζ), softmax ζ, θ)` as a tape program.
pub fn omd_q_on_tape<E: EnvModel + ?Sized>(
    env: &E,
    tape: &mut Tape,
    theta: Var,
    logits: Var,
    tau: f64,
) -> Result<Var> {
    let dims = env.dims();
    let policy = tape.softmax_rows(logits, dims.actions)?;
    let flow = flow_on_tape(env, tape, theta, policy)?;
    let p_log_p = if tau > 0.0 {
        let log_p = tape.log_softmax_rows(logits, dims.actions)?;
        Some(tape.mul(policy, log_p)?)
    } else {
        None
    };
    let (q, _) = q_on_tape(tape, dims, &flow.stages, policy, p_log_p, tau)?;
    Ok(q)
}

/// `(1 - ητ) ζ + η q`.
pub fn mirror_update(tape: &mut Tape, logits: Var, q: Var, eta: f64, tau: f64) -> Result<Var> {
    let memory = tape.scale(logits, 1.0 - eta * tau)?;
    let step = tape.scale(q, eta)?;
    Ok(tape.add(memory, step)?)
}

/// `g(θ, Λ(softmax ζ|θ))` as a tape program.
pub fn objective_on_tape<E: EnvModel + ?Sized>(
    env: &E,
    tape: &mut Tape,
    theta: Var,
    logits: Var,
) -> Result<Var> {
    let policy = tape.softmax_rows(logits, env.dims().actions)?;
    let flow = flow_on_tape(env, tape, theta, policy)?;
    env.objective(tape, theta, &flow.dists)
}

pub fn check_step(eta: f64, tau: f64) -> Result<()> {
    if tau < 0.0 {
        return Err(Error::NegativeTemperature(tau));
    }
    if !(eta > 0.0) || eta * tau > 1.0 {
        return Err(Error::StepTooLarge { eta, tau });
    }
    Ok(())
}

pub fn softmax_policy(logits: &LogPolicy) -> Result<Policy> {
    let dims = logits.dims();
    if let Some(i) = logits.logits().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i}")));
    }
    let mut tape = Tape::detached();
    let z = tape.input(logits.logits())?;
    let p = tape.softmax_rows(z, dims.actions)?;
    Ok(Policy {
        dims,
        probs: tape.value(p).to_vec(),
    })
}

pub fn population_flow<E: EnvModel + ?Sized>(env: &E, theta: &[f64], policy: &Policy) -> Result<Flow> {
    check_theta(env, theta)?;
    if policy.dims() != env.dims() {
        return Err(Error::Shape("policy dimensions differ from the game".into()));
    }
    let mut tape = Tape::detached();
    let th = tape.input(theta)?;
    let pi = tape.constant(policy.probs().to_vec());
    let fv = flow_on_tape(env, &mut tape, th, pi)?;
    let dists = fv.dists.iter().map(|&d| tape.value(d).to_vec()).collect();
    Ok(Flow {
        dims: env.dims(),
        dists,
        drift: fv.drift,
    })
}

struct PlainStages {
    kernels: Vec<Vec<f64>>,
    rewards: Vec<Vec<f64>>,
}

fn plain_stages<E: EnvModel + ?Sized>(env: &E, theta: &[f64], flow: &Flow) -> Result<PlainStages> {
    check_theta(env, theta)?;
    if flow.dims() != env.dims() {
        return Err(Error::Shape("flow dimensions differ from the game".into()));
    }
    let mut tape = Tape::detached();
    let th = tape.input(theta)?;
    let dists: Vec<Var> = flow
        .dists()
        .iter()
        .map(|d| tape.constant(d.clone()))
        .collect();
    let stages = stages_along(env, &mut tape, th, &dists)?;
    Ok(PlainStages {
        kernels: stages.iter().map(|s| tape.value(s.kernel).to_vec()).collect(),
        rewards: stages.iter().map(|s| tape.value(s.reward).to_vec()).collect(),
    })
}

pub fn q_values<E: EnvModel + ?Sized>(
    env: &E,
    theta: &[f64],
    flow: &Flow,
    policy: &Policy,
    tau: f64,
) -> Result<QTable> {
    if tau < 0.0 {
        return Err(Error::NegativeTemperature(tau));
    }
    check_theta(env, theta)?;
    let dims = env.dims();
    let mut tape = Tape::detached();
    let th = tape.input(theta)?;
    let dists: Vec<Var> = flow
        .dists()
        .iter()
        .map(|d| tape.constant(d.clone()))
        .collect();
    let stages = stages_along(env, &mut tape, th, &dists)?;
    let pi = tape.constant(policy.probs().to_vec());
    let plp = tape.constant(policy.p_log_p());
    let (q, vs) = q_on_tape(&mut tape, dims, &stages, pi, Some(plp), tau)?;
    Ok(QTable {
        dims,
        q: tape.value(q).to_vec(),
        v: vs.iter().flat_map(|&v| tape.value(v).to_vec()).collect(),
    })
}

/// Best response to a fixed flow with its optimal values.
#[derive(Clone, Debug)]
pub struct BestResponse {
    pub policy: Policy,
    /// Optimal `v*_h(s)` at `values[h * S + s]`.
    pub values: Vec<f64>,
}

impl BestResponse {
    /// `v*_0`.
    pub fn initial_values(&self) -> &[f64] {
        &self.values[..self.policy.dims().states]
    }
}

/// Soft-Bellman backward pass for `τ > 0`, hard maximum with lowest-index
/// tie-breaking for `τ = 0`.
pub fn best_response<E: EnvModel + ?Sized>(
    env: &E,
    theta: &[f64],
    flow: &Flow,
    tau: f64,
) -> Result<BestResponse> {
    if tau < 0.0 {
        return Err(Error::NegativeTemperature(tau));
    }
    let dims = env.dims();
    let (s_n, a_n) = (dims.states, dims.actions);
    let st = plain_stages(env, theta, flow)?;
    let mut probs = vec![0.0; dims.full()];
    let mut values = vec![0.0; dims.horizon * s_n];
    let mut v_next = vec![0.0; s_n];
    for h in (0..dims.horizon).rev() {
        let (kernel, reward) = (&st.kernels[h], &st.rewards[h]);
        let mut v_h = vec![0.0; s_n];
        for s in 0..s_n {
            let q: Vec<f64> = (0..a_n)
                .map(|a| {
                    let row = s * a_n + a;
                    let cont: f64 = if h + 1 < dims.horizon {
                        kernel[row * s_n..(row + 1) * s_n]
                            .iter()
                            .zip(&v_next)
                            .map(|(p, v)| p * v)
                            .sum()
                    } else {
                        0.0
                    };
                    reward[row] + cont
                })
                .collect();
            let out = &mut probs[dims.index(h, s, 0)..dims.index(h, s, 0) + a_n];
            let (best, qmax) = q
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (a, &v)| if v > acc.1 { (a, v) } else { acc });
            if tau > 0.0 {
                let z: f64 = q.iter().map(|v| ((v - qmax) / tau).exp()).sum();
                for (o, v) in out.iter_mut().zip(&q) {
                    *o = ((v - qmax) / tau).exp() / z;
                }
                v_h[s] = qmax + tau * z.ln();
            } else {
                out[best] = 1.0;
                v_h[s] = qmax;
            }
        }
        values[h * s_n..(h + 1) * s_n].copy_from_slice(&v_h);
        v_next = v_h;
    }
    Ok(BestResponse {
        policy: Policy { dims, probs },
        values,
    })
}

/// `max_π' V^τ(Λ(π), π') − V^τ(Λ(π), π)`.
pub fn exploitability<E: EnvModel + ?Sized>(
    env: &E,
    theta: &[f64],
    policy: &Policy,
    tau: f64,
) -> Result<f64> {
    let flow = population_flow(env, theta, policy)?;
    let br = best_response(env, theta, &flow, tau)?;
    let qt = q_values(env, theta, &flow, policy, tau)?;
    let mu0 = env.initial_distribution();
    let s_n = env.dims().states;
    let best: f64 = mu0.iter().zip(br.initial_values()).map(|(m, v)| m * v).sum();
    let current: f64 = mu0.iter().zip(&qt.v[..s_n]).map(|(m, v)| m * v).sum();
    Ok(best - current)
}

/// `F_omd(θ, ζ) = (1 − ητ) ζ + η q^τ(·|Λ(softmax ζ), softmax ζ, θ)`.
pub fn omd_step<E: EnvModel + ?Sized>(
    env: &E,
    theta: &[f64],
    logits: &LogPolicy,
    eta: f64,
    tau: f64,
) -> Result<LogPolicy> {
    check_step(eta, tau)?;
    check_theta(env, theta)?;
    let mut tape = Tape::detached();
    let th = tape.input(theta)?;
    let z = tape.input(logits.logits())?;
    let q = omd_q_on_tape(env, &mut tape, th, z, tau)?;
    let next = mirror_update(&mut tape, z, q, eta, tau)?;
    LogPolicy::new(env.dims(), tape.value(next).to_vec())
}

/// `steps` sequential applications of [`omd_step`].
pub fn omd_iterate<E: EnvModel + ?Sized>(
    env: &E,
    theta: &[f64],
    logits: &LogPolicy,
    eta: f64,
    tau: f64,
    steps: usize,
) -> Result<LogPolicy> {
    let mut z = logits.clone();
    for step in 0..steps {
        z = omd_step(env, theta, &z, eta, tau).map_err(|e| match e {
            Error::NonFinite(_) => Error::DivergedLogits { step },
            other => other,
        })?;
    }
    Ok(z)
}

/// `τ⁻¹ q^τ` at the given logits: the logits a fixed point of the OMD
/// operator must equal.
pub fn fixed_point_target<E: EnvModel + ?Sized>(
    env: &E,
    theta: &[f64],
    logits: &LogPolicy,
    tau: f64,
) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Invalid("fixed-point target needs tau > 0".into()));
    }
    let mut tape = Tape::detached();
    let th = tape.input(theta)?;
    let z = tape.input(logits.logits())?;
    let q = omd_q_on_tape(env, &mut tape, th, z, tau)?;
    Ok(tape.value(q).iter().map(|v| v / tau).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{BeachBar, BeachBarConfig, SmoothGame, TabularGame};
    use proptest::prelude::*;

    fn one_round(rewards: Vec<f64>, actions: usize) -> TabularGame {
        let dims = Dims::new(1, 1, actions);
        TabularGame::stationary(dims, vec![1.0], vec![1.0; actions], rewards).unwrap()
    }

    fn random_policy(dims: Dims, seed: u64) -> Policy {
        let g = SmoothGame::random(Dims::new(1, dims.full(), 1), 0, seed);
        let logits: Vec<f64> = g.initial_distribution().iter().map(|p| 4.0 * p.ln()).collect();
        softmax_policy(&LogPolicy::new(dims, logits).unwrap()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_policy(&LogPolicy::new(Dims::new(1, 1, 2), vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
        let p = softmax_policy(&LogPolicy::new(Dims::new(1, 1, 3), vec![700.0; 3]).unwrap()).unwrap();
        for x in p.probs() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_policy(&LogPolicy::new(Dims::new(1, 1, 2), vec![3f64.ln(), 0.0]).unwrap()).unwrap();
        assert!((p.probs()[0] - 0.75).abs() < 1e-15 && (p.probs()[1] - 0.25).abs() < 1e-15);
        assert!(LogPolicy::new(Dims::new(1, 1, 2), vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn degenerate_flow_is_one() {
        let g = TabularGame::stationary(Dims::new(4, 1, 1), vec![1.0], vec![1.0], vec![0.3]).unwrap();
        let flow = population_flow(&g, &[], &Policy::uniform(g.dims())).unwrap();
        assert!(flow.dists().iter().all(|d| d == &vec![1.0]));
    }

    #[test]
    fn swap_chain_flow() {
        let dims = Dims::new(2, 2, 2);
        let kernel = vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let g = TabularGame::stationary(dims, vec![1.0, 0.0], kernel, vec![0.0; 4]).unwrap();
        let flow = population_flow(&g, &[], &Policy::uniform(dims)).unwrap();
        assert_eq!(flow.state_marginal(1), vec![0.0, 1.0]);
    }

    #[test]
    fn q_value_examples() {
        let g = one_round(vec![0.2, 0.9, 0.1], 3);
        let pi = Policy::uniform(g.dims());
        let flow = population_flow(&g, &[], &pi).unwrap();
        let qt = q_values(&g, &[], &flow, &pi, 0.3).unwrap();
        assert_eq!(qt.q, vec![0.2, 0.9, 0.1]);

        let g = TabularGame::random(Dims::new(3, 3, 2), 1);
        let ones = TabularGame::new(
            g.dims(),
            g.initial_distribution().to_vec(),
            (0..3).map(|h| g.kernel(h).to_vec()).collect(),
            vec![vec![1.0; 6]; 3],
        )
        .unwrap();
        let pi = Policy::uniform(ones.dims());
        let flow = population_flow(&ones, &[], &pi).unwrap();
        let qt = q_values(&ones, &[], &flow, &pi, 0.0).unwrap();
        for h in 0..3 {
            for s in 0..3 {
                for a in 0..2 {
                    assert!((qt.q(h, s, a) - (3 - h) as f64).abs() < 1e-12);
                }
            }
        }

        let g = TabularGame::stationary(Dims::new(2, 1, 2), vec![1.0], vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let pi = Policy::uniform(g.dims());
        let flow = population_flow(&g, &[], &pi).unwrap();
        let qt = q_values(&g, &[], &flow, &pi, 0.5).unwrap();
        assert!((qt.v(0, 0) - 2f64.ln()).abs() < 1e-12);
        assert!(q_values(&g, &[], &flow, &pi, -1.0).is_err());
    }

    #[test]
    fn value_is_entropy_plus_expected_q() {
        let g = TabularGame::random(Dims::new(3, 3, 3), 8).with_crowd_aversion(0.7);
        let pi = random_policy(g.dims(), 3);
        let flow = population_flow(&g, &[], &pi).unwrap();
        let tau = 0.4;
        let qt = q_values(&g, &[], &flow, &pi, tau).unwrap();
        for h in 0..3 {
            for s in 0..3 {
                let row = pi.row(h, s);
                let ent: f64 = -row.iter().map(|p| p * p.ln()).sum::<f64>();
                let eq: f64 = (0..3).map(|a| row[a] * qt.q(h, s, a)).sum();
                assert!((qt.v(h, s) - tau * ent - eq).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn best_response_examples() {
        let g = one_round(vec![0.2, 0.9, 0.1], 3);
        let flow = population_flow(&g, &[], &Policy::uniform(g.dims())).unwrap();
        let br = best_response(&g, &[], &flow, 0.0).unwrap();
        assert_eq!(br.policy.probs(), &[0.0, 1.0, 0.0]);
        assert_eq!(br.initial_values(), &[0.9]);

        let g = one_round(vec![0.0, 0.0], 2);
        let flow = population_flow(&g, &[], &Policy::uniform(g.dims())).unwrap();
        let br = best_response(&g, &[], &flow, 1.0).unwrap();
        assert_eq!(br.policy.probs(), &[0.5, 0.5]);
        assert!((br.initial_values()[0] - 2f64.ln()).abs() < 1e-15);

        let g = one_round(vec![0.5, 0.5], 2);
        let flow = population_flow(&g, &[], &Policy::uniform(g.dims())).unwrap();
        assert_eq!(best_response(&g, &[], &flow, 0.0).unwrap().policy.probs(), &[1.0, 0.0]);
    }

    /// Independent oracle: forward rollouts of every deterministic policy
    /// against a frozen flow.
    struct Enumeration {
        dims: Dims,
        kernels: Vec<Vec<f64>>,
        rewards: Vec<Vec<f64>>,
    }

    impl Enumeration {
        fn new(g: &TabularGame, flow: &Flow) -> Self {
            let dims = g.dims();
            let (s_n, a_n) = (dims.states, dims.actions);
            let rewards = (0..dims.horizon)
                .map(|h| {
                    let marginal: Vec<f64> = (0..s_n)
                        .map(|s| (0..a_n).map(|a| flow.at(h)[s * a_n + a]).sum())
                        .collect();
                    (0..s_n * a_n)
                        .map(|i| g.base_reward(h)[i] - g.crowd_aversion() * marginal[i / a_n])
                        .collect()
                })
                .collect();
            Self {
                dims,
                kernels: (0..dims.horizon).map(|h| g.kernel(h).to_vec()).collect(),
                rewards,
            }
        }

        /// Expected total reward from `start` under `pi(h, s, a)`.
        fn rollout(&self, start: &[f64], pi: &dyn Fn(usize, usize, usize) -> f64) -> f64 {
            let (s_n, a_n) = (self.dims.states, self.dims.actions);
            let mut d = start.to_vec();
            let mut total = 0.0;
            for h in 0..self.dims.horizon {
                let mut next = vec![0.0; s_n];
                for s in 0..s_n {
                    for a in 0..a_n {
                        let w = d[s] * pi(h, s, a);
                        total += w * self.rewards[h][s * a_n + a];
                        for s2 in 0..s_n {
                            next[s2] += w * self.kernels[h][(s * a_n + a) * s_n + s2];
                        }
                    }
                }
                d = next;
            }
            total
        }

        fn best(&self, start: &[f64]) -> f64 {
            let (h_n, s_n, a_n) = (self.dims.horizon, self.dims.states, self.dims.actions);
            let cells = h_n * s_n;
            let mut best = f64::NEG_INFINITY;
            for code in 0..a_n.pow(cells as u32) {
                let choice: Vec<usize> = (0..cells).map(|c| code / a_n.pow(c as u32) % a_n).collect();
                let pi = |h: usize, s: usize, a: usize| (choice[h * s_n + s] == a) as u8 as f64;
                best = best.max(self.rollout(start, &pi));
            }
            best
        }
    }

    fn unit(s: usize, n: usize) -> Vec<f64> {
        let mut e = vec![0.0; n];
        e[s] = 1.0;
        e
    }

    #[test]
    fn best_response_matches_enumeration() {
        for seed in 0..50 {
            let g = TabularGame::random(Dims::new(2, 2, 2), seed).with_crowd_aversion(0.5);
            let pi = random_policy(g.dims(), seed + 100);
            let flow = population_flow(&g, &[], &pi).unwrap();
            let oracle = Enumeration::new(&g, &flow);
            let br = best_response(&g, &[], &flow, 0.0).unwrap();
            for s in 0..2 {
                assert!((br.initial_values()[s] - oracle.best(&unit(s, 2))).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn exploitability_matches_enumeration() {
        for seed in 0..30 {
            let g = TabularGame::random(Dims::new(2, 3, 2), seed).with_crowd_aversion(0.3);
            let pi = random_policy(g.dims(), seed + 7);
            let flow = population_flow(&g, &[], &pi).unwrap();
            let oracle = Enumeration::new(&g, &flow);
            let mu0 = g.initial_distribution();
            let expected = oracle.best(mu0) - oracle.rollout(mu0, &|h, s, a| pi.prob(h, s, a));
            let got = exploitability(&g, &[], &pi, 0.0).unwrap();
            assert!((got - expected).abs() <= 1e-8, "seed {seed}: {got} vs {expected}");
        }
    }

    #[test]
    fn single_action_has_no_exploitability() {
        let g = TabularGame::random(Dims::new(3, 3, 1), 2).with_crowd_aversion(1.0);
        let e = exploitability(&g, &[], &Policy::uniform(g.dims()), 0.2).unwrap();
        assert!(e.abs() <= 1e-10);
    }

    #[test]
    fn best_response_fixed_point_has_zero_exploitability() {
        let g = one_round(vec![0.3, 0.1], 2);
        let flow = population_flow(&g, &[], &Policy::uniform(g.dims())).unwrap();
        let br = best_response(&g, &[], &flow, 0.5).unwrap();
        assert!(exploitability(&g, &[], &br.policy, 0.5).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn omd_step_examples() {
        let g = TabularGame::random(Dims::new(2, 3, 2), 4).with_crowd_aversion(0.2);
        let z0 = LogPolicy::zeros(g.dims());
        let next = omd_step(&g, &[], &z0, 1.0, 1.0).unwrap();
        let pi = Policy::uniform(g.dims());
        let flow = population_flow(&g, &[], &pi).unwrap();
        let qt = q_values(&g, &[], &flow, &pi, 1.0).unwrap();
        for (a, b) in next.logits().iter().zip(&qt.q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(omd_step(&g, &[], &z0, 2.0, 0.6).is_err());

        assert_eq!(omd_iterate(&g, &[], &z0, 1.0, 0.5, 0).unwrap(), z0);
        let one = omd_step(&g, &[], &z0, 1.0, 0.5).unwrap();
        assert_eq!(omd_iterate(&g, &[], &z0, 1.0, 0.5, 1).unwrap(), one);
        let two = omd_step(&g, &[], &one, 1.0, 0.5).unwrap();
        assert_eq!(omd_iterate(&g, &[], &z0, 1.0, 0.5, 2).unwrap(), two);
    }

    #[test]
    fn policy_independent_fixed_point() {
        let g = one_round(vec![0.2, 0.7, 0.4], 3);
        let tau = 0.25;
        let z = LogPolicy::new(g.dims(), vec![0.2 / tau, 0.7 / tau, 0.4 / tau]).unwrap();
        let next = omd_step(&g, &[], &z, 3.0, tau).unwrap();
        for (a, b) in next.logits().iter().zip(z.logits()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn iterated_fixed_point_is_stationary_under_omd() {
        let g = TabularGame::random(Dims::new(3, 3, 2), 6).with_crowd_aversion(0.3);
        let tau = 2.0;
        let mut z = LogPolicy::zeros(g.dims());
        for _ in 0..200 {
            z = LogPolicy::new(g.dims(), fixed_point_target(&g, &[], &z, tau).unwrap()).unwrap();
        }
        let next = omd_step(&g, &[], &z, 0.5, tau).unwrap();
        let gap = next.logits().iter().zip(z.logits()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-9, "{gap}");
    }

    #[test]
    fn beach_bar_exploitability_trends_down() {
        let env = BeachBar::new(BeachBarConfig::new(10, 5, 1.0)).unwrap();
        let theta = vec![0.0; 10];
        let (eta, tau) = (1.0, 1e-3);
        let mut z = omd_iterate(&env, &theta, &LogPolicy::zeros(env.dims()), eta, tau, 50).unwrap();
        let mut samples = Vec::new();
        for t in 50..=400 {
            if t % 25 == 0 {
                samples.push(exploitability(&env, &theta, &softmax_policy(&z).unwrap(), tau).unwrap());
            }
            z = omd_step(&env, &theta, &z, eta, tau).unwrap();
        }
        let n = samples.len() as f64;
        let mx = (n - 1.0) / 2.0;
        let my = samples.iter().sum::<f64>() / n;
        let slope: f64 = samples.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
        assert!(slope <= 0.0, "{samples:?}");
        assert!(samples.last().unwrap() <= &samples[0], "{samples:?}");
    }

    proptest! {
        #[test]
        fn flows_conserve_mass(seed in 0u64..10_000, crowd in 0.0f64..2.0, s in 1usize..5, a in 1usize..4, h in 1usize..4) {
            let dims = Dims::new(h, s, a);
            let g = TabularGame::random(dims, seed).with_crowd_aversion(crowd);
            let flow = population_flow(&g, &[], &random_policy(dims, seed ^ 1)).unwrap();
            for d in flow.dists() {
                prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(d.iter().all(|x| *x >= 0.0));
            }
            let sg = SmoothGame::random(dims, 2, seed);
            let flow = population_flow(&sg, &[0.3, -0.2], &random_policy(dims, seed ^ 2)).unwrap();
            for d in flow.dists() {
                prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(d.iter().all(|x| *x >= 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(logits in proptest::collection::vec(-30.0f64..30.0, 6), shifts in proptest::collection::vec(-50.0f64..50.0, 2)) {
            let dims = Dims::new(1, 2, 3);
            let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, z)| z + shifts[i / 3]).collect();
            let p = softmax_policy(&LogPolicy::new(dims, logits).unwrap()).unwrap();
            let q = softmax_policy(&LogPolicy::new(dims, shifted).unwrap()).unwrap();
            for (x, y) in p.probs().iter().zip(q.probs()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn exploitability_nonnegative(seed in 0u64..1_000_000, tau in prop_oneof![Just(0.0), 0.01f64..1.0], crowd in 0.0f64..2.0) {
            let dims = Dims::new(1 + (seed % 3) as usize, 2 + (seed % 2) as usize, 2 + (seed % 3) as usize);
            let g = TabularGame::random(dims, seed).with_crowd_aversion(crowd);
            let e = exploitability(&g, &[], &random_policy(dims, seed.wrapping_add(17)), tau).unwrap();
            prop_assert!(e >= -1e-10);
        }
    }
}
