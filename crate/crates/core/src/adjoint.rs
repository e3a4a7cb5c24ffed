//! Design gradients through iterated equilibrium updates.
//!
//! For an update `ζ_{t+1} = F(θ, ζ_t)` applied `T` times and an objective
//! `G(θ, ζ_T)`, the gradient of `θ ↦ G(θ, F^{(T)}(θ, ζ_0))` is accumulated by
//! the reverse recursion
//!
//! ```text
//! λ_T = ∂_ζ G,   λ_t = λ_{t+1} ∂_ζ F(θ, ζ_t),
//! ∇θ  = ∂_θ G + Σ_t λ_{t+1} ∂_θ F(θ, ζ_t)
//! ```
//!
//! using one vector-Jacobian product per step. Forward states are kept every
//! `stride` steps and the segments in between are recomputed on the way
//! back, with the same code path as the forward pass, so every stride gives
//! a bitwise identical gradient.

use std::time::Instant;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mfg::{check_step, mirror_update, objective_on_tape, omd_q_on_tape, EnvModel, LogPolicy};

/// A differentiable update `F(θ, ζ)` with a terminal objective `G(θ, ζ)`.
pub trait UpdateRule {
    fn state_len(&self) -> usize;

    fn param_len(&self) -> usize;

    fn step(&self, tape: &mut Tape, theta: Var, state: Var) -> Result<Var>;

    fn objective(&self, tape: &mut Tape, theta: Var, state: Var) -> Result<Var>;
}

/// Log-space OMD on a game: `F(θ, ζ) = (1 − ητ)ζ + η q^τ(·|Λ(softmax ζ), softmax ζ, θ)`
/// and `G(θ, ζ) = g(θ, Λ(softmax ζ))`.
pub struct OmdRule<'a, E: ?Sized> {
    pub env: &'a E,
    pub eta: f64,
    pub tau: f64,
}

impl<E: EnvModel + ?Sized> UpdateRule for OmdRule<'_, E> {
    fn state_len(&self) -> usize {
        self.env.dims().full()
    }

    fn param_len(&self) -> usize {
        self.env.param_len()
    }

    fn step(&self, tape: &mut Tape, theta: Var, state: Var) -> Result<Var> {
        let q = omd_q_on_tape(self.env, tape, theta, state, self.tau)?;
        mirror_update(tape, state, q, self.eta, self.tau)
    }

    fn objective(&self, tape: &mut Tape, theta: Var, state: Var) -> Result<Var> {
        objective_on_tape(self.env, tape, theta, state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Checkpointing {
    /// Keep every forward state.
    FullCache,
    /// Keep every `k`-th state and recompute the rest.
    Stride(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjointConfig {
    /// Number of update applications.
    pub steps: usize,
    pub eta: f64,
    pub tau: f64,
    pub checkpointing: Checkpointing,
}

impl AdjointConfig {
    /// Stride `⌈√(T+1)⌉`.
    pub fn new(steps: usize, eta: f64, tau: f64) -> Self {
        Self {
            steps,
            eta,
            tau,
            checkpointing: Checkpointing::Stride(default_stride(steps)),
        }
    }

    pub fn with_checkpointing(mut self, checkpointing: Checkpointing) -> Self {
        self.checkpointing = checkpointing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_step(self.eta, self.tau)?;
        validate_checkpointing(self.steps, self.checkpointing)
    }
}

pub fn default_stride(steps: usize) -> usize {
    ((steps + 1) as f64).sqrt().ceil() as usize
}

fn validate_checkpointing(steps: usize, checkpointing: Checkpointing) -> Result<()> {
    if let Checkpointing::Stride(k) = checkpointing {
        if k == 0 || k > steps + 1 {
            return Err(Error::Config(format!(
                "checkpoint stride {k} must lie in 1..={}",
                steps + 1
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub forward_seconds: f64,
    pub backward_seconds: f64,
    /// Most forward states held at once.
    pub peak_cached_states: usize,
    /// Largest single-step tape.
    pub max_tape_nodes: usize,
}

#[derive(Clone, Debug)]
pub struct AmidResult {
    pub objective_value: f64,
    pub grad_theta: Vec<f64>,
    pub final_logits: Vec<f64>,
    pub diagnostics: Diagnostics,
}

fn step_plain<R: UpdateRule + ?Sized>(rule: &R, theta: &[f64], state: &[f64], t: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::detached();
    let th = tape.input(theta)?;
    let z = tape.input(state)?;
    let next = rule.step(&mut tape, th, z).map_err(|e| match e {
        Error::NonFinite(_) => Error::DivergedLogits { step: t },
        other => other,
    })?;
    let out = tape.value(next);
    if out.len() != state.len() {
        return Err(Error::Shape(format!(
            "update maps {} entries to {}",
            state.len(),
            out.len()
        )));
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::DivergedLogits { step: t });
    }
    Ok(out.to_vec())
}

fn check_lengths<R: UpdateRule + ?Sized>(rule: &R, theta: &[f64], state: &[f64]) -> Result<()> {
    if theta.len() != rule.param_len() || state.len() != rule.state_len() {
        return Err(Error::Shape(format!(
            "got {} parameters and {} logits, rule expects {} and {}",
            theta.len(),
            state.len(),
            rule.param_len(),
            rule.state_len()
        )));
    }
    Ok(())
}

/// `ζ_T` after `steps` updates.
pub fn iterate<R: UpdateRule + ?Sized>(rule: &R, theta: &[f64], state0: &[f64], steps: usize) -> Result<Vec<f64>> {
    check_lengths(rule, theta, state0)?;
    let mut z = state0.to_vec();
    for t in 0..steps {
        z = step_plain(rule, theta, &z, t)?;
    }
    Ok(z)
}

/// `G(θ, F^{(T)}(θ, ζ_0))` without differentiation.
pub fn rule_objective<R: UpdateRule + ?Sized>(rule: &R, theta: &[f64], state0: &[f64], steps: usize) -> Result<f64> {
    let z = iterate(rule, theta, state0, steps)?;
    let mut tape = Tape::detached();
    let th = tape.input(theta)?;
    let zv = tape.input(&z)?;
    let g = rule.objective(&mut tape, th, zv)?;
    Ok(tape.scalar(g))
}

/// Gradient of `θ ↦ G(θ, F^{(T)}(θ, ζ_0))` by the adjoint recursion.
pub fn rule_gradient<R: UpdateRule + ?Sized>(
    rule: &R,
    theta: &[f64],
    state0: &[f64],
    steps: usize,
    checkpointing: Checkpointing,
) -> Result<AmidResult> {
    check_lengths(rule, theta, state0)?;
    validate_checkpointing(steps, checkpointing)?;
    let stride = match checkpointing {
        Checkpointing::FullCache => 1,
        Checkpointing::Stride(k) => k,
    };

    let started = Instant::now();
    let mut checkpoints: Vec<Vec<f64>> = Vec::with_capacity(steps / stride + 1);
    let mut z = state0.to_vec();
    for t in 0..steps {
        if t % stride == 0 {
            checkpoints.push(z.clone());
        }
        z = step_plain(rule, theta, &z, t)?;
    }
    let final_logits = z;

    let mut tape = Tape::new();
    let th = tape.input(theta)?;
    let zt = tape.input(&final_logits)?;
    let g = rule.objective(&mut tape, th, zt)?;
    let objective_value = tape.scalar(g);
    let cot = tape.vjp(g, &[1.0])?;
    let mut grad = cot.wrt(th);
    let mut lambda = cot.wrt(zt);
    let mut diagnostics = Diagnostics {
        forward_seconds: started.elapsed().as_secs_f64(),
        max_tape_nodes: tape.len(),
        ..Diagnostics::default()
    };
    drop(tape);

    let started = Instant::now();
    let mut peak = checkpoints.len() + 1;
    for (c, start) in checkpoints.iter().enumerate().rev() {
        let t0 = c * stride;
        let t1 = (t0 + stride).min(steps);
        let mut segment = Vec::with_capacity(t1 - t0);
        segment.push(start.clone());
        for t in t0 + 1..t1 {
            let next = step_plain(rule, theta, segment.last().unwrap(), t - 1)?;
            segment.push(next);
        }
        peak = peak.max(checkpoints.len() + segment.len());
        for (i, state) in segment.iter().enumerate().rev() {
            let mut tape = Tape::new();
            let th = tape.input(theta)?;
            let zv = tape.input(state)?;
            let out = rule.step(&mut tape, th, zv)?;
            let cot = tape.vjp(out, &lambda)?;
            for (g, d) in grad.iter_mut().zip(cot.wrt(th)) {
                *g += d;
            }
            lambda = cot.wrt(zv);
            diagnostics.max_tape_nodes = diagnostics.max_tape_nodes.max(tape.len());
            if lambda.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("adjoint at step {}", t0 + i)));
            }
        }
    }
    if steps == 0 {
        peak = 1;
    }
    diagnostics.backward_seconds = started.elapsed().as_secs_f64();
    diagnostics.peak_cached_states = peak;
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design gradient".into()));
    }
    Ok(AmidResult {
        objective_value,
        grad_theta: grad,
        final_logits,
        diagnostics,
    })
}

/// `G^T_approx(θ) = g(θ, Λ(softmax F^{(T)}(θ, ζ_0)))`.
pub fn t_step_objective<E: EnvModel + ?Sized>(
    env: &E,
    theta: &[f64],
    logits0: &LogPolicy,
    cfg: &AdjointConfig,
) -> Result<f64> {
    cfg.validate()?;
    let rule = OmdRule {
        env,
        eta: cfg.eta,
        tau: cfg.tau,
    };
    rule_objective(&rule, theta, logits0.logits(), cfg.steps)
}

/// Exact gradient of [`t_step_objective`].
pub fn amid_gradient<E: EnvModel + ?Sized>(
    env: &E,
    theta: &[f64],
    logits0: &LogPolicy,
    cfg: &AdjointConfig,
) -> Result<AmidResult> {
    cfg.validate()?;
    let rule = OmdRule {
        env,
        eta: cfg.eta,
        tau: cfg.tau,
    };
    rule_gradient(&rule, theta, logits0.logits(), cfg.steps, cfg.checkpointing)
}

/// A mirror map `∇h` with its inverse, both as tape programs.
pub trait MirrorMap {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var>;
    fn inverse(&self, tape: &mut Tape, y: Var) -> Result<Var>;
}

/// `∇h = id`.
pub struct IdentityMirror;

impl MirrorMap for IdentityMirror {
    fn forward(&self, _tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(x)
    }
    fn inverse(&self, _tape: &mut Tape, y: Var) -> Result<Var> {
        Ok(y)
    }
}

/// `∇h(x) = c·x`.
pub struct ScaledMirror(pub f64);

impl MirrorMap for ScaledMirror {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(tape.scale(x, self.0)?)
    }
    fn inverse(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        Ok(tape.scale(y, 1.0 / self.0)?)
    }
}

/// The rule `F̄(θ, ζ) = F(θ, (∇h)⁻¹ ζ)` with objective `G(θ, (∇h)⁻¹ ζ)`.
pub struct Bregman<'a, R: ?Sized, M: ?Sized> {
    pub rule: &'a R,
    pub mirror: &'a M,
}

impl<R: UpdateRule + ?Sized, M: MirrorMap + ?Sized> UpdateRule for Bregman<'_, R, M> {
    fn state_len(&self) -> usize {
        self.rule.state_len()
    }

    fn param_len(&self) -> usize {
        self.rule.param_len()
    }

    fn step(&self, tape: &mut Tape, theta: Var, state: Var) -> Result<Var> {
        let x = self.mirror.inverse(tape, state)?;
        self.rule.step(tape, theta, x)
    }

    fn objective(&self, tape: &mut Tape, theta: Var, state: Var) -> Result<Var> {
        let x = self.mirror.inverse(tape, state)?;
        self.rule.objective(tape, theta, x)
    }
}

pub const MIRROR_ROUND_TRIP_TOL: f64 = 1e-8;

/// Largest `‖(∇h)⁻¹(∇h(x)) − x‖_∞` over the probes; errors above
/// [`MIRROR_ROUND_TRIP_TOL`].
pub fn check_mirror<M: MirrorMap + ?Sized>(mirror: &M, probes: &[Vec<f64>]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in probes {
        let mut tape = Tape::detached();
        let xv = tape.input(x)?;
        let y = mirror.forward(&mut tape, xv)?;
        let back = mirror.inverse(&mut tape, y)?;
        let err = tape
            .value(back)
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    if worst > MIRROR_ROUND_TRIP_TOL {
        return Err(Error::Invalid(format!(
            "mirror map inverse fails the round trip by {worst:e}"
        )));
    }
    Ok(worst)
}

fn mirror_probes(x0: &[f64]) -> Vec<Vec<f64>> {
    let mut probes = vec![x0.to_vec()];
    for k in 1..=4 {
        probes.push(
            (0..x0.len())
                .map(|i| ((i * 31 + k * 17) as f64 * 0.618).sin() * k as f64)
                .collect(),
        );
    }
    probes
}

/// [`rule_gradient`] for the mirror-substituted rule, after checking the
/// mirror round trip on probes around `state0`.
pub fn rule_gradient_bregman<R: UpdateRule + ?Sized, M: MirrorMap + ?Sized>(
    rule: &R,
    mirror: &M,
    theta: &[f64],
    state0: &[f64],
    steps: usize,
    checkpointing: Checkpointing,
) -> Result<AmidResult> {
    check_mirror(mirror, &mirror_probes(state0))?;
    rule_gradient(&Bregman { rule, mirror }, theta, state0, steps, checkpointing)
}

/// [`amid_gradient`] with the OMD step taken through a mirror map.
pub fn amid_gradient_bregman<E: EnvModel + ?Sized, M: MirrorMap + ?Sized>(
    env: &E,
    theta: &[f64],
    logits0: &LogPolicy,
    cfg: &AdjointConfig,
    mirror: &M,
) -> Result<AmidResult> {
    cfg.validate()?;
    let rule = OmdRule {
        env,
        eta: cfg.eta,
        tau: cfg.tau,
    };
    rule_gradient_bregman(&rule, mirror, theta, logits0.logits(), cfg.steps, cfg.checkpointing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::central_differences;
    use crate::env::{SmoothGame, TabularGame};
    use crate::mfg::Dims;

    /// `F(θ, ζ) = a·ζ + b·θ`, `G = Σζ` or `½Σζ²`.
    struct Linear {
        a: f64,
        b: f64,
        quadratic: bool,
        n: usize,
    }

    impl UpdateRule for Linear {
        fn state_len(&self) -> usize {
            self.n
        }
        fn param_len(&self) -> usize {
            self.n
        }
        fn step(&self, tape: &mut Tape, theta: Var, state: Var) -> Result<Var> {
            let x = tape.scale(state, self.a)?;
            let y = tape.scale(theta, self.b)?;
            Ok(tape.add(x, y)?)
        }
        fn objective(&self, tape: &mut Tape, _theta: Var, state: Var) -> Result<Var> {
            if self.quadratic {
                let sq = tape.mul(state, state)?;
                let s = tape.sum(sq)?;
                Ok(tape.scale(s, 0.5)?)
            } else {
                Ok(tape.sum(state)?)
            }
        }
    }

    #[test]
    fn constant_update_gives_unit_gradient() {
        let rule = Linear {
            a: 0.0,
            b: 1.0,
            quadratic: false,
            n: 3,
        };
        let r = rule_gradient(&rule, &[0.5, -1.0, 2.0], &[0.0; 3], 1, Checkpointing::FullCache).unwrap();
        assert_eq!(r.grad_theta, vec![1.0; 3]);
    }

    #[test]
    fn reflection_update_gradient() {
        let rule = Linear {
            a: -1.0,
            b: 1.0,
            quadratic: true,
            n: 3,
        };
        let theta = [0.5, -1.0, 2.0];
        for steps in [1, 3, 5] {
            let r = rule_gradient(&rule, &theta, &[0.0; 3], steps, Checkpointing::FullCache).unwrap();
            assert_eq!(r.grad_theta, theta.to_vec());
        }
        // an even number of reflections returns to ζ_0
        let r = rule_gradient(&rule, &theta, &[0.0; 3], 2, Checkpointing::FullCache).unwrap();
        assert_eq!(r.grad_theta, vec![0.0; 3]);
    }

    #[test]
    fn scaled_mirror_halves_gradient() {
        let rule = Linear {
            a: 0.0,
            b: 1.0,
            quadratic: false,
            n: 3,
        };
        let r = rule_gradient_bregman(&rule, &ScaledMirror(2.0), &[0.5, -1.0, 2.0], &[0.0; 3], 1, Checkpointing::FullCache)
            .unwrap();
        assert_eq!(r.grad_theta, vec![0.5; 3]);
    }

    struct Broken;

    impl MirrorMap for Broken {
        fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
            Ok(tape.scale(x, 2.0)?)
        }
        fn inverse(&self, _tape: &mut Tape, y: Var) -> Result<Var> {
            Ok(y)
        }
    }

    #[test]
    fn broken_mirror_rejected() {
        let rule = Linear {
            a: 0.0,
            b: 1.0,
            quadratic: false,
            n: 2,
        };
        assert!(rule_gradient_bregman(&rule, &Broken, &[1.0, 1.0], &[0.0; 2], 1, Checkpointing::FullCache).is_err());
    }

    #[test]
    fn zero_steps_is_plain_objective() {
        let env = SmoothGame::random(Dims::new(2, 3, 2), 2, 5);
        let theta = [0.2, -0.3];
        let z0 = LogPolicy::zeros(env.dims());
        let cfg = AdjointConfig::new(0, 0.5, 0.1);
        let mut tape = Tape::detached();
        let th = tape.input(&theta).unwrap();
        let z = tape.input(z0.logits()).unwrap();
        let g = objective_on_tape(&env, &mut tape, th, z).unwrap();
        assert_eq!(t_step_objective(&env, &theta, &z0, &cfg).unwrap(), tape.scalar(g));
    }

    #[test]
    fn degenerate_game_objective_is_horizon() {
        let d = Dims::new(4, 1, 1);
        let env = TabularGame::stationary(d, vec![1.0], vec![1.0], vec![0.3]).unwrap();
        let cfg = AdjointConfig::new(7, 1.0, 0.5);
        let v = t_step_objective(&env, &[], &LogPolicy::zeros(d), &cfg).unwrap();
        assert_eq!(v, 4.0);
    }

    #[test]
    fn smooth_gradient_matches_finite_differences() {
        let env = SmoothGame::random(Dims::new(2, 3, 2), 3, 11);
        let theta = [0.1, -0.4, 0.7];
        let z0 = LogPolicy::zeros(env.dims());
        let cfg = AdjointConfig::new(25, 0.5, 0.1);
        let r = amid_gradient(&env, &theta, &z0, &cfg).unwrap();
        let (numeric, bad) = central_differences(|t| t_step_objective(&env, t, &z0, &cfg), &theta, 1e-5).unwrap();
        assert!(bad.is_empty());
        for (a, n) in r.grad_theta.iter().zip(&numeric) {
            assert!((a - n).abs() / a.abs().max(1.0) < 1e-5, "{a} vs {n}");
        }
        assert_eq!(r.objective_value, t_step_objective(&env, &theta, &z0, &cfg).unwrap());
    }

    #[test]
    fn strides_agree_bitwise() {
        let env = SmoothGame::random(Dims::new(3, 3, 2), 2, 2);
        let theta = [0.3, 0.1];
        let z0 = LogPolicy::zeros(env.dims());
        let steps = 17;
        let base = amid_gradient(&env, &theta, &z0, &AdjointConfig::new(steps, 0.5, 0.2).with_checkpointing(Checkpointing::FullCache))
            .unwrap();
        assert_eq!(base.diagnostics.peak_cached_states, steps + 1);
        for k in [1, 2, 5, 17, 18] {
            let cfg = AdjointConfig::new(steps, 0.5, 0.2).with_checkpointing(Checkpointing::Stride(k));
            let r = amid_gradient(&env, &theta, &z0, &cfg).unwrap();
            assert_eq!(r.grad_theta, base.grad_theta, "stride {k}");
            assert_eq!(r.final_logits, base.final_logits);
        }
        let r = amid_gradient(&env, &theta, &z0, &AdjointConfig::new(steps, 0.5, 0.2)).unwrap();
        assert!(r.diagnostics.peak_cached_states <= 2 * default_stride(steps) + 2);
        assert!(AdjointConfig::new(steps, 0.5, 0.2)
            .with_checkpointing(Checkpointing::Stride(19))
            .validate()
            .is_err());
    }

    #[test]
    fn identity_mirror_is_bitwise_plain() {
        let env = SmoothGame::random(Dims::new(2, 3, 2), 2, 9);
        let theta = [0.3, 0.1];
        let z0 = LogPolicy::zeros(env.dims());
        let cfg = AdjointConfig::new(6, 0.5, 0.2);
        let a = amid_gradient(&env, &theta, &z0, &cfg).unwrap();
        let b = amid_gradient_bregman(&env, &theta, &z0, &cfg, &IdentityMirror).unwrap();
        assert_eq!(a.grad_theta, b.grad_theta);
        assert_eq!(a.objective_value, b.objective_value);
    }

    #[test]
    fn ignored_parameters_have_zero_gradient() {
        let env = SmoothGame::random(Dims::new(2, 3, 2), 3, 4).ignoring_theta();
        let r = amid_gradient(&env, &[0.1, 0.2, 0.3], &LogPolicy::zeros(env.dims()), &AdjointConfig::new(10, 0.5, 0.1))
            .unwrap();
        assert_eq!(r.grad_theta, vec![0.0; 3]);
    }

    #[test]
    fn step_size_checked() {
        let env = SmoothGame::random(Dims::new(1, 2, 2), 1, 4);
        let cfg = AdjointConfig::new(3, 11.0, 0.1);
        assert!(matches!(
            amid_gradient(&env, &[0.0], &LogPolicy::zeros(env.dims()), &cfg),
            Err(Error::StepTooLarge { .. })
        ));
    }
}
