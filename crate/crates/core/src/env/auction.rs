//! Batched-auction mean-field game.
//!
//! States are valuations `i/|V|` for `i < |V|` plus the inactive state `⊥`
//! stored last; actions are bids `j/|A|`. Each round a mechanism observes the
//! active bid distribution `ν` and the remaining goods `r`, allocates a
//! fraction `α_h` of the population to the highest bids and charges winners a
//! payment per bid level. Winners move to `⊥`; everyone then follows the
//! valuation dynamics.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mechanism::Mechanism;
use crate::mfg::{repeat_index, tile_index, Dims, EnvModel, Flow, Stage};
use crate::params::ParamLayout;

/// Tolerance of the zero-mass and threshold equalities in [`nzd_check`].
pub const NZD_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Utility {
    Linear,
    RiskAverse { beta: f64 },
    RiskSeeking { beta: f64 },
    Hyperbolic { lambda: f64 },
}

impl Utility {
    /// Utility of surplus `x = s − p` at round `h`.
    pub fn eval(&self, x: f64, h: usize) -> f64 {
        match *self {
            Utility::Linear => x,
            Utility::RiskAverse { beta } => (1.0 - (-beta * x).exp()) / (1.0 - (-beta).exp()),
            Utility::RiskSeeking { beta } => ((beta * x).exp() - 1.0) / (beta.exp() - 1.0),
            Utility::Hyperbolic { lambda } => x / (1.0 + lambda * h as f64),
        }
    }

    fn on_tape(&self, tape: &mut Tape, x: Var, h: usize) -> Result<Var> {
        Ok(match *self {
            Utility::Linear => x,
            Utility::RiskAverse { beta } => {
                let c = 1.0 / (1.0 - (-beta).exp());
                let e = tape.scale(x, -beta)?;
                let e = tape.exp(e)?;
                let e = tape.scale(e, -c)?;
                tape.shift(e, c)?
            }
            Utility::RiskSeeking { beta } => {
                let c = 1.0 / (beta.exp() - 1.0);
                let e = tape.scale(x, beta)?;
                let e = tape.exp(e)?;
                let e = tape.scale(e, c)?;
                tape.shift(e, -c)?
            }
            Utility::Hyperbolic { lambda } => tape.scale(x, 1.0 / (1.0 + lambda * h as f64))?,
        })
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Utility::Linear => true,
            Utility::RiskAverse { beta } | Utility::RiskSeeking { beta } => beta > 0.0 && beta.is_finite(),
            Utility::Hyperbolic { lambda } => lambda >= 0.0 && lambda.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid utility parameters {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dynamics {
    /// Winners stay at `⊥`, valuations never change.
    SingleMinded,
    /// Valuations move with `w(v'|v) ∝ exp(−(rate·v − v')²/2σ²)`; winners stay
    /// at `⊥`.
    GaussianDrift { rate: f64, sigma: f64 },
    /// Bidders at `⊥` re-enter with probability `rho` with a fresh valuation
    /// drawn from `μ0`.
    Regenerate { rho: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuctionObjective {
    Revenue,
    Efficiency,
    Mix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuctionConfig {
    /// `|V|`.
    pub values: usize,
    /// `|A|`.
    pub bids: usize,
    pub horizon: usize,
    pub alpha_max: f64,
    /// Initial distribution over valuations (length `|V|`).
    pub mu0: Vec<f64>,
    pub utility: Utility,
    pub dynamics: Dynamics,
    pub objective: AuctionObjective,
}

impl AuctionConfig {
    /// Uniform valuations, single-minded linear bidders, revenue objective.
    pub fn single_minded(values: usize, bids: usize, horizon: usize, alpha_max: f64) -> Self {
        Self {
            values,
            bids,
            horizon,
            alpha_max,
            mu0: vec![1.0 / values as f64; values],
            utility: Utility::Linear,
            dynamics: Dynamics::SingleMinded,
            objective: AuctionObjective::Revenue,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values == 0 || self.bids == 0 || self.horizon == 0 {
            return Err(Error::Config("auction needs |V|, |A|, H >= 1".into()));
        }
        if !(self.alpha_max > 0.0 && self.alpha_max < 1.0) {
            return Err(Error::Config(format!(
                "alpha_max must lie in (0, 1), got {}",
                self.alpha_max
            )));
        }
        if self.mu0.len() != self.values
            || self.mu0.iter().any(|m| !(*m >= 0.0))
            || (self.mu0.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::Config("mu0 must be a distribution over valuations".into()));
        }
        self.utility.validate()?;
        match self.dynamics {
            Dynamics::SingleMinded => {}
            Dynamics::GaussianDrift { rate, sigma } => {
                if !(sigma > 0.0) || !rate.is_finite() {
                    return Err(Error::Config("gaussian drift needs sigma > 0".into()));
                }
            }
            Dynamics::Regenerate { rho } => {
                if !(0.0..=1.0).contains(&rho) {
                    return Err(Error::Config("regeneration probability must lie in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    pub fn states(&self) -> usize {
        self.values + 1
    }

    pub fn inactive(&self) -> usize {
        self.values
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.horizon, self.states(), self.bids)
    }

    pub fn value_grid(&self) -> Vec<f64> {
        (0..self.values).map(|i| i as f64 / self.values as f64).collect()
    }

    pub fn bid_grid(&self) -> Vec<f64> {
        (0..self.bids).map(|j| j as f64 / self.bids as f64).collect()
    }

    /// Valuation dynamics `w(s'|s)` over `S × S`.
    pub fn valuation_kernel(&self) -> Vec<f64> {
        let (nv, s_n) = (self.values, self.states());
        let bot = self.inactive();
        let grid = self.value_grid();
        let mut w = vec![0.0; s_n * s_n];
        w[bot * s_n + bot] = 1.0;
        for v in 0..nv {
            match self.dynamics {
                Dynamics::SingleMinded | Dynamics::Regenerate { .. } => w[v * s_n + v] = 1.0,
                Dynamics::GaussianDrift { rate, sigma } => {
                    let row: Vec<f64> = grid
                        .iter()
                        .map(|&v2| (-(rate * grid[v] - v2).powi(2) / (2.0 * sigma * sigma)).exp())
                        .collect();
                    let z: f64 = row.iter().sum();
                    for (v2, x) in row.iter().enumerate() {
                        w[v * s_n + v2] = x / z;
                    }
                }
            }
        }
        if let Dynamics::Regenerate { rho } = self.dynamics {
            for (v, m) in self.mu0.iter().enumerate() {
                w[bot * s_n + v] = rho * m;
            }
            w[bot * s_n + bot] = 1.0 - rho;
        }
        w
    }
}

/// `ν^{−⊥}(L)`: the bid distribution of active states.
pub fn nu_active(dist: &[f64], values: usize, bids: usize) -> Vec<f64> {
    let mut nu = vec![0.0; bids];
    for row in dist[..values * bids].chunks(bids) {
        for (n, x) in nu.iter_mut().zip(row) {
            *n += x;
        }
    }
    nu
}

/// Winning probability of each bid level for active bidders, recorded on a
/// tape: `clamp((α − Σ_{a'>a} ν(a'))/ν(a), 0, 1)` with `0/0 = 0` and
/// `ε/0 = ∞`.
pub fn p_win_on_tape(tape: &mut Tape, nu: Var, alloc: Var) -> Result<Var> {
    let a_n = tape.size(nu);
    let above = tape.cumsum(nu, true, true)?;
    let alloc_b = tape.gather(alloc, vec![0; a_n].into())?;
    let numer = tape.sub(alloc_b, above)?;
    let empty: Vec<usize> = (0..a_n).filter(|&a| tape.value(nu)[a] == 0.0).collect();
    let (numer, den) = if empty.is_empty() {
        (numer, nu)
    } else {
        let fixed = empty
            .iter()
            .map(|&a| (a, if tape.value(numer)[a] > 0.0 { 1.0 } else { 0.0 }))
            .collect();
        let numer = tape.replace(numer, fixed)?;
        let den = tape.replace(nu, empty.iter().map(|&a| (a, 1.0)).collect())?;
        (numer, den)
    };
    let ratio = tape.div(numer, den)?;
    Ok(tape.clamp(ratio, 0.0, 1.0)?)
}

/// Active winning probabilities per bid level.
pub fn p_win_active(nu: &[f64], alpha: f64) -> Vec<f64> {
    let mut tape = Tape::detached();
    let n = tape.constant(nu.to_vec());
    let a = tape.constant(vec![alpha]);
    let p = p_win_on_tape(&mut tape, n, a).expect("division guarded");
    tape.value(p).to_vec()
}

/// `p_win(s, a, L, α)`; zero at `⊥`.
pub fn p_win(s: usize, a: usize, dist: &[f64], values: usize, alpha: f64) -> f64 {
    if s >= values {
        return 0.0;
    }
    let bids = dist.len() / (values + 1);
    p_win_active(&nu_active(dist, values, bids), alpha)[a]
}

/// The case form of the winning probability: 1 when all mass at or above `a`
/// fits into `α`, 0 when the mass strictly above already exhausts it, and
/// the proportional share otherwise.
pub fn p_win_case_form(nu: &[f64], a: usize, alpha: f64) -> f64 {
    let above: f64 = nu[a + 1..].iter().sum();
    let at_or_above = above + nu[a];
    if at_or_above <= alpha {
        1.0
    } else if above >= alpha {
        0.0
    } else {
        (alpha - above) / nu[a]
    }
}

/// Largest bid with positive mass whose upper tail holds at least `α`.
pub fn threshold_bid(nu: &[f64], alpha: f64) -> usize {
    (0..nu.len())
        .rev()
        .find(|&a| nu[a] > 0.0 && nu[a..].iter().sum::<f64>() >= alpha)
        .unwrap_or(0)
}

/// Mass of active agents that do not win when `α` is allocated; `d` is a
/// sub-distribution over `V × A`.
pub fn xi_op(d: &[f64], bids: usize, alpha: f64) -> Result<Vec<f64>> {
    let total: f64 = d.iter().sum();
    if alpha < 0.0 || alpha > total + NZD_TOL {
        return Err(Error::Invalid(format!(
            "allocating {alpha} from active mass {total}"
        )));
    }
    if alpha == 0.0 {
        return Ok(d.to_vec());
    }
    let values = d.len() / bids;
    let nu = nu_active(d, values, bids);
    let th = threshold_bid(&nu, alpha);
    let keep = (nu[th..].iter().sum::<f64>() - alpha).max(0.0) / nu[th];
    Ok(d.iter()
        .enumerate()
        .map(|(i, &x)| match (i % bids).cmp(&th) {
            std::cmp::Ordering::Greater => 0.0,
            std::cmp::Ordering::Equal => keep * x,
            std::cmp::Ordering::Less => x,
        })
        .collect())
}

/// State distribution right after allocation: losers keep their state and
/// winners join `⊥`.
pub fn post_alloc_xi(dist: &[f64], values: usize, alpha: f64) -> Vec<f64> {
    let bids = dist.len() / (values + 1);
    let nu = nu_active(dist, values, bids);
    let active: f64 = nu.iter().sum();
    let alpha = alpha.min(active);
    let p = p_win_active(&nu, alpha);
    let mut xi: Vec<f64> = dist[..values * bids]
        .chunks(bids)
        .map(|row| row.iter().zip(&p).map(|(l, w)| l * (1.0 - w)).sum())
        .collect();
    xi.push(dist[values * bids..].iter().sum::<f64>() + alpha);
    xi
}

#[derive(Clone, Debug, PartialEq)]
pub struct NzdViolation {
    pub round: usize,
    pub bid: usize,
    /// `Σ_{s∈V} L_h(s, a)`.
    pub mass: f64,
    /// `Σ_{s∈V, a'>a} L_h(s, a')`.
    pub mass_above: f64,
    pub alpha: f64,
}

/// Bids with no active mass sitting exactly at the allocation threshold.
pub fn nzd_check(flow: &Flow, values: usize, alphas: &[f64]) -> Vec<NzdViolation> {
    let bids = flow.dims().actions;
    let mut out = Vec::new();
    for (h, (dist, &alpha)) in flow.dists().iter().zip(alphas).enumerate() {
        let nu = nu_active(dist, values, bids);
        for a in 0..bids {
            let above: f64 = nu[a + 1..].iter().sum();
            if nu[a].abs() <= NZD_TOL && (above - alpha).abs() <= NZD_TOL {
                out.push(NzdViolation {
                    round: h,
                    bid: a,
                    mass: nu[a],
                    mass_above: above,
                    alpha,
                });
            }
        }
    }
    out
}

/// Everything a round produces, as tape nodes.
pub struct RoundVars {
    pub nu: Var,
    pub alloc: Var,
    pub payments: Var,
    /// Active winning probability per bid.
    pub p_win: Var,
    /// Utility of winning, `[v][a]` over active states.
    pub utility: Var,
    pub kernel: Var,
    pub reward: Var,
    pub remaining: Var,
}

/// Plain per-round mechanism quantities along a flow.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSummary {
    pub remaining: f64,
    pub alloc: f64,
    pub payments: Vec<f64>,
    pub p_win: Vec<f64>,
    pub revenue: f64,
}

#[derive(Clone, Debug)]
pub struct AuctionEnv {
    cfg: AuctionConfig,
    mech: Arc<dyn Mechanism>,
    mu0: Vec<f64>,
    kernel_base: Vec<f64>,
    kernel_diff: Vec<f64>,
    values_grid: Vec<f64>,
}

impl AuctionEnv {
    pub fn new(cfg: AuctionConfig, mech: Arc<dyn Mechanism>) -> Result<Self> {
        cfg.validate()?;
        let (s_n, a_n) = (cfg.states(), cfg.bids);
        let bot = cfg.inactive();
        let w = cfg.valuation_kernel();
        let mut kernel_base = Vec::with_capacity(s_n * a_n * s_n);
        let mut kernel_diff = Vec::with_capacity(s_n * a_n * s_n);
        for s in 0..s_n {
            for _ in 0..a_n {
                for s2 in 0..s_n {
                    kernel_base.push(w[s * s_n + s2]);
                    kernel_diff.push(w[bot * s_n + s2] - w[s * s_n + s2]);
                }
            }
        }
        let mut mu0 = cfg.mu0.clone();
        mu0.push(0.0);
        let grid = cfg.value_grid();
        let values_grid = (0..cfg.values * a_n).map(|i| grid[i / a_n]).collect();
        Ok(Self {
            cfg,
            mech,
            mu0,
            kernel_base,
            kernel_diff,
            values_grid,
        })
    }

    pub fn config(&self) -> &AuctionConfig {
        &self.cfg
    }

    pub fn mechanism(&self) -> &Arc<dyn Mechanism> {
        &self.mech
    }

    /// Same game with another mechanism.
    pub fn with_mechanism(&self, mech: Arc<dyn Mechanism>) -> Self {
        Self {
            mech,
            ..self.clone()
        }
    }

    /// Same game started from another valuation distribution.
    pub fn with_initial(&self, mu0: Vec<f64>) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.mu0 = mu0;
        Self::new(cfg, self.mech.clone())
    }

    /// Mechanism, winning probabilities, kernel and reward of round `h`.
    pub fn round_on_tape(
        &self,
        tape: &mut Tape,
        h: usize,
        theta: Var,
        dist: Var,
        remaining: Var,
    ) -> Result<RoundVars> {
        let (nv, a_n, s_n) = (self.cfg.values, self.cfg.bids, self.cfg.states());
        let active = tape.slice(dist, 0, nv * a_n)?;
        let ones = tape.constant(vec![1.0; nv]);
        let nu = tape.matvec(active, ones, nv, a_n, true)?;
        let mech = self.mech.evaluate(tape, h, theta, nu, remaining)?;
        if let Some((bid, &value)) = tape
            .value(mech.payments)
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p >= 0.0))
        {
            return Err(Error::NegativePayment { bid, value });
        }
        let p = p_win_on_tape(tape, nu, mech.alloc)?;

        let tile = tile_index(nv, a_n);
        let pay = tape.gather(mech.payments, tile.clone())?;
        let vals = tape.constant(self.values_grid.clone());
        let surplus = tape.sub(vals, pay)?;
        let utility = self.cfg.utility.on_tape(tape, surplus, h)?;
        let p_tiled = tape.gather(p, tile)?;
        let won = tape.mul(p_tiled, utility)?;
        let none = tape.zeros(a_n);
        let reward = tape.concat(&[won, none])?;

        let pw = tape.concat(&[p_tiled, none])?;
        let pw_spread = tape.gather(pw, repeat_index(s_n * a_n, s_n))?;
        let diff = tape.constant(self.kernel_diff.clone());
        let moved = tape.mul(pw_spread, diff)?;
        let base = tape.constant(self.kernel_base.clone());
        let kernel = tape.add(base, moved)?;

        let remaining = tape.sub(remaining, mech.alloc)?;
        Ok(RoundVars {
            nu,
            alloc: mech.alloc,
            payments: mech.payments,
            p_win: p,
            utility,
            kernel,
            reward,
            remaining,
        })
    }

    fn rounds_along(&self, tape: &mut Tape, theta: Var, flow: &[Var]) -> Result<Vec<RoundVars>> {
        let mut r = tape.constant(vec![self.cfg.alpha_max]);
        let mut out = Vec::with_capacity(flow.len());
        for (h, &d) in flow.iter().enumerate() {
            let round = self.round_on_tape(tape, h, theta, d, r)?;
            r = round.remaining;
            out.push(round);
        }
        Ok(out)
    }

    fn revenue_on_tape(&self, tape: &mut Tape, rounds: &[RoundVars]) -> Result<Var> {
        let mut terms = Vec::with_capacity(rounds.len());
        for r in rounds {
            let sold = tape.mul(r.nu, r.p_win)?;
            let paid = tape.mul(sold, r.payments)?;
            terms.push(tape.sum(paid)?);
        }
        let all = tape.concat(&terms)?;
        Ok(tape.sum(all)?)
    }

    fn efficiency_on_tape(&self, tape: &mut Tape, rounds: &[RoundVars], flow: &[Var]) -> Result<Var> {
        let mut terms = Vec::with_capacity(rounds.len());
        for (r, &l) in rounds.iter().zip(flow) {
            let lr = tape.mul(l, r.reward)?;
            terms.push(tape.sum(lr)?);
        }
        let all = tape.concat(&terms)?;
        Ok(tape.sum(all)?)
    }

    fn plain_objective(&self, theta: &[f64], flow: &Flow, kind: AuctionObjective) -> Result<f64> {
        let mut tape = Tape::detached();
        let th = tape.input(theta)?;
        let dists: Vec<Var> = flow.dists().iter().map(|d| tape.constant(d.clone())).collect();
        let rounds = self.rounds_along(&mut tape, th, &dists)?;
        let out = match kind {
            AuctionObjective::Revenue => self.revenue_on_tape(&mut tape, &rounds)?,
            AuctionObjective::Efficiency => self.efficiency_on_tape(&mut tape, &rounds, &dists)?,
            AuctionObjective::Mix => {
                let a = self.revenue_on_tape(&mut tape, &rounds)?;
                let b = self.efficiency_on_tape(&mut tape, &rounds, &dists)?;
                tape.add(a, b)?
            }
        };
        Ok(tape.scalar(out))
    }

    /// `g_rev(θ, L)`.
    pub fn revenue(&self, theta: &[f64], flow: &Flow) -> Result<f64> {
        self.plain_objective(theta, flow, AuctionObjective::Revenue)
    }

    /// `g_efficiency(θ, L)`.
    pub fn efficiency(&self, theta: &[f64], flow: &Flow) -> Result<f64> {
        self.plain_objective(theta, flow, AuctionObjective::Efficiency)
    }

    /// Per-round allocations, payments and revenue along a flow.
    pub fn summaries(&self, theta: &[f64], flow: &Flow) -> Result<Vec<RoundSummary>> {
        let mut tape = Tape::detached();
        let th = tape.input(theta)?;
        let dists: Vec<Var> = flow.dists().iter().map(|d| tape.constant(d.clone())).collect();
        let mut r = tape.constant(vec![self.cfg.alpha_max]);
        let mut out = Vec::new();
        for (h, &d) in dists.iter().enumerate() {
            let remaining = tape.scalar(r);
            let round = self.round_on_tape(&mut tape, h, th, d, r)?;
            let revenue = tape
                .value(round.nu)
                .iter()
                .zip(tape.value(round.p_win))
                .zip(tape.value(round.payments))
                .map(|((n, w), p)| n * w * p)
                .sum();
            out.push(RoundSummary {
                remaining,
                alloc: tape.scalar(round.alloc),
                payments: tape.value(round.payments).to_vec(),
                p_win: tape.value(round.p_win).to_vec(),
                revenue,
            });
            r = round.remaining;
        }
        Ok(out)
    }
}

impl EnvModel for AuctionEnv {
    fn dims(&self) -> Dims {
        self.cfg.dims()
    }

    fn initial_distribution(&self) -> &[f64] {
        &self.mu0
    }

    fn param_layout(&self) -> ParamLayout {
        self.mech.param_layout()
    }

    fn initial_carry(&self, tape: &mut Tape, _theta: Var) -> Result<Vec<Var>> {
        Ok(vec![tape.constant(vec![self.cfg.alpha_max])])
    }

    fn stage(&self, tape: &mut Tape, h: usize, theta: Var, dist: Var, carry: &[Var]) -> Result<Stage> {
        let r = self.round_on_tape(tape, h, theta, dist, carry[0])?;
        Ok(Stage {
            kernel: r.kernel,
            reward: r.reward,
            carry: vec![r.remaining],
        })
    }

    fn objective(&self, tape: &mut Tape, theta: Var, flow: &[Var]) -> Result<Var> {
        let rounds = self.rounds_along(tape, theta, flow)?;
        match self.cfg.objective {
            AuctionObjective::Revenue => self.revenue_on_tape(tape, &rounds),
            AuctionObjective::Efficiency => self.efficiency_on_tape(tape, &rounds, flow),
            AuctionObjective::Mix => {
                let a = self.revenue_on_tape(tape, &rounds)?;
                let b = self.efficiency_on_tape(tape, &rounds, flow)?;
                Ok(tape.add(a, b)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::{FirstPrice, Mechanism, MechanismVars, NeuralMechanism, StaticMechanism};
    use crate::mfg::{population_flow, softmax_policy, LogPolicy, Policy};
    use proptest::prelude::*;

    /// Fixed allocation per round and fixed payments, for hand-checkable
    /// examples.
    #[derive(Debug)]
    struct Fixed {
        alloc: Vec<f64>,
        payments: Vec<f64>,
    }

    impl Mechanism for Fixed {
        fn name(&self) -> &'static str {
            "fixed"
        }
        fn param_layout(&self) -> ParamLayout {
            ParamLayout::new()
        }
        fn evaluate(&self, tape: &mut Tape, h: usize, _: Var, _: Var, _: Var) -> Result<MechanismVars> {
            Ok(MechanismVars {
                alloc: tape.constant(vec![self.alloc[h]]),
                payments: tape.constant(self.payments.clone()),
            })
        }
    }

    fn fixed_env(values: usize, bids: usize, alloc: Vec<f64>, payments: Vec<f64>) -> AuctionEnv {
        let cfg = AuctionConfig::single_minded(values, bids, alloc.len(), 0.99);
        AuctionEnv::new(cfg, Arc::new(Fixed { alloc, payments })).unwrap()
    }

    #[test]
    fn nu_examples() {
        // states {v, ⊥}, bids {a1, a2}
        assert_eq!(nu_active(&[0.3, 0.5, 0.2, 0.0], 1, 2), vec![0.3, 0.5]);
        assert_eq!(nu_active(&[0.0, 0.0, 0.4, 0.6], 1, 2), vec![0.0, 0.0]);
        let nu = nu_active(&[0.1, 0.2, 0.3, 0.4], 2, 2);
        assert!((nu[0] - 0.4).abs() < 1e-15 && (nu[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn p_win_examples() {
        let nu = [0.5, 0.5];
        assert_eq!(p_win_active(&nu, 0.25), vec![0.0, 0.5]);
        let p = p_win_active(&nu, 0.6);
        assert!((p[0] - 0.2).abs() < 1e-15 && p[1] == 1.0);
        assert_eq!(p_win(1, 0, &[0.5, 0.5, 0.0, 0.0], 1, 0.6), 0.0);
        assert_eq!(p_win_active(&nu, 0.0), vec![0.0, 0.0]);
        // 0/0 = 0 below the threshold, ε/0 = ∞ above.
        assert_eq!(p_win_active(&[0.0, 0.5, 0.0], 0.25), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn xi_examples() {
        let d = [0.6, 0.4];
        assert_eq!(xi_op(&d, 2, 0.4).unwrap(), vec![0.6, 0.0]);
        let x = xi_op(&d, 2, 0.2).unwrap();
        assert!((x[0] - 0.6).abs() < 1e-15 && (x[1] - 0.2).abs() < 1e-15);
        assert_eq!(xi_op(&d, 2, 0.0).unwrap(), d.to_vec());
        assert!(xi_op(&d, 2, 1.5).is_err());
    }

    #[test]
    fn post_alloc_examples() {
        let l = [0.8, 0.2];
        let xi = post_alloc_xi(&l, 1, 0.3);
        assert!((xi[0] - 0.5).abs() < 1e-15 && (xi[1] - 0.5).abs() < 1e-15);
        assert_eq!(post_alloc_xi(&l, 1, 0.0), vec![0.8, 0.2]);
        assert!((post_alloc_xi(&l, 1, 0.8)[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn utility_examples() {
        assert!((Utility::Linear.eval(0.6 - 0.2, 0) - 0.4).abs() < 1e-15);
        assert!((Utility::Hyperbolic { lambda: 1.0 }.eval(0.4, 1) - 0.2).abs() < 1e-15);
        let ra = Utility::RiskAverse { beta: 1.0 };
        assert!((ra.eval(1.0, 0) - 1.0).abs() < 1e-15 && ra.eval(0.0, 0) == 0.0);
        let rs = Utility::RiskSeeking { beta: 2.0 };
        assert!((rs.eval(1.0, 0) - 1.0).abs() < 1e-15 && rs.eval(0.0, 0) == 0.0);
    }

    #[test]
    fn revenue_one_round() {
        // one valuation, two bids; all active mass bids the high one.
        let env = fixed_env(1, 2, vec![0.5], vec![0.0, 0.6]);
        let flow = Flow::new(env.dims(), vec![vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert!((env.revenue(&[], &flow).unwrap() - 0.3).abs() < 1e-15);
        let none = fixed_env(1, 2, vec![0.0], vec![0.0, 0.6]);
        assert_eq!(none.revenue(&[], &flow).unwrap(), 0.0);
    }

    #[test]
    fn revenue_two_rounds_is_sum_of_rounds() {
        let env = fixed_env(2, 2, vec![0.3, 0.2], vec![0.1, 0.4]);
        let l0 = vec![0.1, 0.4, 0.3, 0.2, 0.0, 0.0];
        let l1 = vec![0.2, 0.1, 0.1, 0.1, 0.3, 0.2];
        let flow = Flow::new(env.dims(), vec![l0.clone(), l1.clone()]).unwrap();
        let by_hand = |l: &[f64], alpha: f64| {
            let nu = nu_active(l, 2, 2);
            (0..2)
                .map(|a| nu[a] * p_win_case_form(&nu, a, alpha) * [0.1, 0.4][a])
                .sum::<f64>()
        };
        let expect = by_hand(&l0, 0.3) + by_hand(&l1, 0.2);
        assert!((env.revenue(&[], &flow).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn efficiency_examples() {
        // payment equals bid equals valuation: zero surplus.
        let cfg = AuctionConfig::single_minded(4, 4, 1, 0.5);
        let env = AuctionEnv::new(cfg, Arc::new(FirstPrice::new(1, 4, 0.5))).unwrap();
        let mut l = vec![0.0; 20];
        for v in 0..4 {
            l[v * 4 + v] = 0.25;
        }
        let flow = Flow::new(env.dims(), vec![l.clone()]).unwrap();
        assert_eq!(env.efficiency(&[], &flow).unwrap(), 0.0);
        // zero payments: allocated valuation mass.
        let free = fixed_env(4, 4, vec![0.5], vec![0.0; 4]);
        let expect: f64 = 0.25 * (0.75 + 0.5);
        assert!((free.efficiency(&[], &flow).unwrap() - expect).abs() < 1e-15);
        let mut mix_cfg = free.config().clone();
        mix_cfg.objective = AuctionObjective::Mix;
        let fixed = Fixed {
            alloc: vec![0.5],
            payments: vec![0.0, 0.1, 0.2, 0.3],
        };
        let env = AuctionEnv::new(mix_cfg, Arc::new(fixed)).unwrap();
        let mut tape = Tape::detached();
        let th = tape.input(&[]).unwrap();
        let d = tape.constant(l);
        let g = env.objective(&mut tape, th, &[d]).unwrap();
        let sum = env.revenue(&[], &flow).unwrap() + env.efficiency(&[], &flow).unwrap();
        assert!((tape.scalar(g) - sum).abs() < 1e-15);
    }

    #[test]
    fn nzd_examples() {
        let d = Dims::new(1, 2, 2);
        let flow = Flow::new(d, vec![vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let v = nzd_check(&flow, 1, &[1.0]);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].bid, 0);
        assert!(nzd_check(&flow, 1, &[0.5]).is_empty());
        let full = Flow::new(d, vec![vec![0.3, 0.7, 0.0, 0.0]]).unwrap();
        assert!(nzd_check(&full, 1, &[0.7]).is_empty());
    }

    #[test]
    fn single_minded_winners_go_inactive() {
        let env = fixed_env(3, 3, vec![0.4], vec![0.0, 0.1, 0.2]);
        let mut tape = Tape::detached();
        let th = tape.input(&[]).unwrap();
        let d = tape.constant(vec![1.0 / 9.0; 12].iter().enumerate().map(|(i, x)| if i >= 9 { 0.0 } else { *x }).collect());
        let r = tape.constant(vec![0.99]);
        let round = env.round_on_tape(&mut tape, 0, th, d, r).unwrap();
        let k = tape.value(round.kernel);
        let pw = tape.value(round.p_win).to_vec();
        for v in 0..3 {
            for a in 0..3 {
                let row = &k[(v * 3 + a) * 4..(v * 3 + a + 1) * 4];
                assert!((row[3] - pw[a]).abs() < 1e-15);
                assert!((row[v] - (1.0 - pw[a])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn regeneration_kernel_reenters_from_mu0() {
        let mut cfg = AuctionConfig::single_minded(3, 2, 2, 0.5);
        cfg.dynamics = Dynamics::Regenerate { rho: 0.3 };
        let w = cfg.valuation_kernel();
        assert!((w[3 * 4] - 0.1).abs() < 1e-15 && (w[3 * 4 + 3] - 0.7).abs() < 1e-15);
        cfg.dynamics = Dynamics::GaussianDrift { rate: 3.0, sigma: 0.2 };
        let w = cfg.valuation_kernel();
        for v in 0..4 {
            assert!((w[v * 4..(v + 1) * 4].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn recorded_reward_is_bitwise_unrecorded() {
        let cfg = AuctionConfig::single_minded(5, 5, 3, 0.8);
        let mech = NeuralMechanism::new(3, 5, 6).unwrap();
        let theta = mech.init_params(4);
        let env = AuctionEnv::new(cfg, Arc::new(mech)).unwrap();
        let dims = env.dims();
        let logits: Vec<f64> = (0..dims.full()).map(|i| ((i * 7 % 11) as f64) * 0.1).collect();
        let run = |mut tape: Tape| {
            let th = tape.input(&theta).unwrap();
            let z = tape.input(&logits).unwrap();
            let p = tape.softmax_rows(z, dims.actions).unwrap();
            let fv = crate::mfg::flow_on_tape(&env, &mut tape, th, p).unwrap();
            fv.stages.iter().flat_map(|s| tape.value(s.reward).to_vec()).collect::<Vec<f64>>()
        };
        let a = run(Tape::new());
        let b = run(Tape::detached());
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn static_budget_is_spent_exactly() {
        let cfg = AuctionConfig::single_minded(4, 4, 3, 0.6);
        let mech = StaticMechanism::new(3, 4, 0.6);
        let theta: Vec<f64> = (0..mech.param_layout().len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let env = AuctionEnv::new(cfg, Arc::new(mech)).unwrap();
        let flow = population_flow(&env, &theta, &Policy::uniform(env.dims())).unwrap();
        let total: f64 = env.summaries(&theta, &flow).unwrap().iter().map(|s| s.alloc).sum();
        assert!((total - 0.6).abs() < 1e-15);
    }

    #[test]
    fn flows_conserve_mass_under_every_dynamics() {
        for dynamics in [
            Dynamics::SingleMinded,
            Dynamics::GaussianDrift { rate: 3.0, sigma: 0.2 },
            Dynamics::Regenerate { rho: 0.3 },
        ] {
            let mut cfg = AuctionConfig::single_minded(6, 4, 4, 0.8);
            cfg.dynamics = dynamics;
            let mech = NeuralMechanism::new(4, 4, 5).unwrap();
            let theta = mech.init_params(1);
            let env = AuctionEnv::new(cfg, Arc::new(mech)).unwrap();
            let z: Vec<f64> = (0..env.dims().full()).map(|i| (i as f64 * 0.71).cos()).collect();
            let pi = softmax_policy(&LogPolicy::new(env.dims(), z).unwrap()).unwrap();
            let flow = population_flow(&env, &theta, &pi).unwrap();
            for d in flow.dists() {
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(d.iter().all(|x| *x >= 0.0));
            }
            let total: f64 = env.summaries(&theta, &flow).unwrap().iter().map(|s| s.alloc).sum();
            assert!(total <= 0.8 + 1e-12);
        }
    }

    fn sub_dist(max_len: usize) -> impl Strategy<Value = (Vec<f64>, usize)> {
        (1usize..4, 1usize..5).prop_flat_map(move |(v, a)| {
            let n = (v * a).min(max_len);
            (
                proptest::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.0f64..1.0], n..=n),
                Just(a),
            )
        })
        .prop_map(|(w, a)| {
            let z: f64 = w.iter().sum::<f64>() + 0.5;
            (w.iter().map(|x| x / z).collect(), a)
        })
    }

    proptest! {
        #[test]
        fn xi_mass_accounting((d, a) in sub_dist(12), frac in 0.0f64..1.0) {
            let total: f64 = d.iter().sum();
            let alpha = frac * total;
            let x = xi_op(&d, a, alpha).unwrap();
            prop_assert!((x.iter().sum::<f64>() - (total - alpha)).abs() < 1e-12);
        }

        #[test]
        fn p_win_is_monotone(nu in proptest::collection::vec(0.0f64..1.0, 1..6), a1 in 0.0f64..1.0, a2 in 0.0f64..1.0) {
            let z: f64 = nu.iter().sum::<f64>() + 0.1;
            let nu: Vec<f64> = nu.iter().map(|x| x / z).collect();
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            let p_lo = p_win_active(&nu, lo);
            let p_hi = p_win_active(&nu, hi);
            for a in 0..nu.len() {
                prop_assert!(p_hi[a] >= p_lo[a]);
                if a + 1 < nu.len() {
                    prop_assert!(p_lo[a + 1] >= p_lo[a]);
                }
            }
        }

        #[test]
        fn post_alloc_matches_xi((d, a) in sub_dist(12), frac in 0.0f64..1.0) {
            let values = d.len() / a;
            let mut l = d[..values * a].to_vec();
            let active: f64 = l.iter().sum();
            l.extend(std::iter::repeat((1.0 - active) / a as f64).take(a));
            let alpha = frac * active;
            let xi = post_alloc_xi(&l, values, alpha);
            let x = xi_op(&l[..values * a], a, alpha).unwrap();
            for v in 0..values {
                let s: f64 = x[v * a..(v + 1) * a].iter().sum();
                prop_assert!((xi[v] - s).abs() < 1e-12);
            }
            prop_assert!((xi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
