//! Beach-bar congestion pricing on a line of `K` positions.
//!
//! Agents move left, stay or move right (actions `0, 1, 2` move by `-1, 0,
//! +1`, clamped at the ends), want to be close to the bar at `⌊K/2⌋`, dislike
//! crowded positions and pay a per-position price `θ_s = p_max·sigmoid(ξ_s)`.
//! The designer controls `ξ` and maximizes `-Σ_{h,s} exp(K·L_h(s))`.

use std::sync::Arc;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::mfg::{repeat_index, Dims, EnvModel, Flow, Stage};
use crate::params::ParamLayout;

pub const MARGINAL_FLOOR: f64 = 1e-12;
const MOVES: [i64; 3] = [-1, 0, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct BeachBarConfig {
    pub positions: usize,
    pub horizon: usize,
    pub p_max: f64,
    /// Sign of the `|a|/K` movement term; `+1` keeps the reward as published.
    pub movement_sign: f64,
}

impl BeachBarConfig {
    pub fn new(positions: usize, horizon: usize, p_max: f64) -> Self {
        Self {
            positions,
            horizon,
            p_max,
            movement_sign: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions < 2 {
            return Err(Error::Config("beach bar needs K >= 2".into()));
        }
        if self.horizon < 1 {
            return Err(Error::Config("beach bar needs H >= 1".into()));
        }
        if !(self.p_max > 0.0 && self.p_max <= 1.0) {
            return Err(Error::Config(format!("p_max must lie in (0, 1], got {}", self.p_max)));
        }
        if !self.movement_sign.is_finite() {
            return Err(Error::Config("movement sign must be finite".into()));
        }
        Ok(())
    }

    pub fn bar(&self) -> usize {
        self.positions / 2
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.horizon, self.positions, MOVES.len())
    }
}

/// Deterministic movement kernel, `S * A * S`.
pub fn bb_transition(cfg: &BeachBarConfig) -> Vec<f64> {
    let k = cfg.positions;
    let mut kernel = vec![0.0; k * MOVES.len() * k];
    for s in 0..k {
        for (a, m) in MOVES.iter().enumerate() {
            let next = (s as i64 + m).clamp(0, k as i64 - 1) as usize;
            kernel[(s * MOVES.len() + a) * k + next] = 1.0;
        }
    }
    kernel
}

/// `θ_s = p_max·sigmoid(ξ_s)`.
pub fn bb_price_map(xi: &[f64], p_max: f64) -> Vec<f64> {
    xi.iter().map(|&x| p_max * sigmoid(x)).collect()
}

/// Part of the reward that does not depend on the population or prices.
fn base_reward(cfg: &BeachBarConfig) -> Vec<f64> {
    let k = cfg.positions as f64;
    let bar = cfg.bar() as f64;
    (0..cfg.positions)
        .flat_map(|s| {
            MOVES
                .iter()
                .map(move |m| -((s as f64) - bar).abs() / k + cfg.movement_sign * (m.abs() as f64) / k)
        })
        .collect()
}

/// Reward `[s][a]` at state marginal `marginal` and prices `theta`.
pub fn bb_reward(cfg: &BeachBarConfig, marginal: &[f64], prices: &[f64]) -> Vec<f64> {
    let base = base_reward(cfg);
    base.iter()
        .enumerate()
        .map(|(i, b)| {
            let s = i / MOVES.len();
            b - marginal[s].max(MARGINAL_FLOOR).ln() / 3.0 - prices[s]
        })
        .collect()
}

/// `-Σ_{h,s} exp(K·L_h(s))` over state marginals.
pub fn bb_objective(cfg: &BeachBarConfig, flow: &Flow) -> f64 {
    let k = cfg.positions as f64;
    (0..flow.dims().horizon)
        .map(|h| -flow.state_marginal(h).iter().map(|m| (k * m).exp()).sum::<f64>())
        .sum()
}

#[derive(Clone, Debug)]
pub struct BeachBar {
    cfg: BeachBarConfig,
    mu0: Vec<f64>,
    kernel: Vec<f64>,
    base: Vec<f64>,
    spread: Arc<[usize]>,
}

impl BeachBar {
    pub fn new(cfg: BeachBarConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.positions;
        Ok(Self {
            mu0: vec![1.0 / k as f64; k],
            kernel: bb_transition(&cfg),
            base: base_reward(&cfg),
            spread: repeat_index(k, MOVES.len()),
            cfg,
        })
    }

    pub fn config(&self) -> &BeachBarConfig {
        &self.cfg
    }

    /// Prices for a design vector `ξ`.
    pub fn prices(&self, xi: &[f64]) -> Vec<f64> {
        bb_price_map(xi, self.cfg.p_max)
    }
}

impl EnvModel for BeachBar {
    fn dims(&self) -> Dims {
        self.cfg.dims()
    }

    fn initial_distribution(&self) -> &[f64] {
        &self.mu0
    }

    fn param_layout(&self) -> ParamLayout {
        ParamLayout::new().with("xi", &[self.cfg.positions])
    }

    fn stage(&self, tape: &mut Tape, h: usize, theta: Var, dist: Var, _carry: &[Var]) -> Result<Stage> {
        let kernel = tape.constant(self.kernel.clone());
        let marginal = tape.sum_rows(dist, MOVES.len())?;
        if let Some(m) = tape.value(marginal).iter().find(|m| **m < MARGINAL_FLOOR) {
            log::warn!("beach bar round {h}: state marginal {m:e} floored at {MARGINAL_FLOOR:e}");
        }
        let floored = tape.clamp(marginal, MARGINAL_FLOOR, f64::INFINITY)?;
        let log_m = tape.log(floored)?;
        let sig = tape.sigmoid(theta)?;
        let prices = tape.scale(sig, self.cfg.p_max)?;
        let log_price = {
            let crowd = tape.scale(log_m, 1.0 / 3.0)?;
            tape.add(crowd, prices)?
        };
        let spread = tape.gather(log_price, self.spread.clone())?;
        let base = tape.constant(self.base.clone());
        let reward = tape.sub(base, spread)?;
        Ok(Stage {
            kernel,
            reward,
            carry: Vec::new(),
        })
    }

    fn objective(&self, tape: &mut Tape, _theta: Var, flow: &[Var]) -> Result<Var> {
        let k = self.cfg.positions as f64;
        let all = tape.concat(flow)?;
        let marginals = tape.sum_rows(all, MOVES.len())?;
        let scaled = tape.scale(marginals, k)?;
        let e = tape.exp(scaled)?;
        let total = tape.sum(e)?;
        Ok(tape.scale(total, -1.0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg::{population_flow, Policy};
    use proptest::prelude::*;

    fn cfg(k: usize, h: usize) -> BeachBarConfig {
        BeachBarConfig::new(k, h, 1.0)
    }

    #[test]
    fn boundary_moves_are_clamped() {
        let c = cfg(10, 1);
        let p = bb_transition(&c);
        assert_eq!(p[0], 1.0); // s=0, a=-1 -> 0
        assert_eq!(p[(3 * 3 + 2) * 10 + 4], 1.0);
        assert_eq!(p[(9 * 3 + 2) * 10 + 9], 1.0);
    }

    #[test]
    fn reward_examples() {
        let c = cfg(10, 1);
        let m = vec![0.1; 10];
        let mut prices = vec![0.0; 10];
        let r = bb_reward(&c, &m, &prices);
        assert!((r[5 * 3 + 1] - 0.767528364331348).abs() < 1e-6);
        prices[0] = 0.5;
        let r = bb_reward(&c, &m, &prices);
        assert!((r[2] - (-0.132472)).abs() < 1e-6);
    }

    #[test]
    fn price_map_examples() {
        assert_eq!(bb_price_map(&[0.0], 0.8), vec![0.4]);
        let p = bb_price_map(&[0.0, 3f64.ln()], 0.5);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.375).abs() < 1e-15);
        assert!((bb_price_map(&[50.0], 0.7)[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn objective_examples() {
        let c = cfg(2, 1);
        let d = Dims::new(1, 2, 3);
        let uniform = Flow::new(d, vec![vec![0.5 / 3.0; 6]]).unwrap();
        assert!((bb_objective(&c, &uniform) + 2.0 * std::f64::consts::E).abs() < 1e-12);
        let point = Flow::new(d, vec![vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        let e = std::f64::consts::E;
        assert!((bb_objective(&c, &point) + (e * e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn tape_matches_plain_helpers() {
        let c = cfg(5, 2);
        let env = BeachBar::new(c.clone()).unwrap();
        let xi = [0.3, -1.0, 0.0, 2.0, 0.5];
        let dist: Vec<f64> = (0..15).map(|i| (i as f64 + 1.0) / 120.0).collect();
        let mut tape = Tape::new();
        let th = tape.input(&xi).unwrap();
        let d = tape.input(&dist).unwrap();
        let st = env.stage(&mut tape, 0, th, d, &[]).unwrap();
        let marg: Vec<f64> = dist.chunks(3).map(|r| r.iter().sum()).collect();
        let plain = bb_reward(&c, &marg, &env.prices(&xi));
        for (a, b) in tape.value(st.reward).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(tape.value(st.kernel), bb_transition(&c).as_slice());
    }

    #[test]
    fn three_state_rollout_stays_uniform() {
        let env = BeachBar::new(cfg(3, 2)).unwrap();
        let pi = Policy::uniform(env.dims());
        let flow = population_flow(&env, &[0.0; 3], &pi).unwrap();
        for m in flow.state_marginal(1) {
            assert!((m - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn prices_shift_rewards_exactly(c in -1.0f64..1.0, m in proptest::collection::vec(0.01f64..1.0, 4)) {
            let cf = cfg(4, 1);
            let p0 = vec![0.1, 0.2, 0.3, 0.4];
            let p1: Vec<f64> = p0.iter().map(|p| p + c).collect();
            let r0 = bb_reward(&cf, &m, &p0);
            let r1 = bb_reward(&cf, &m, &p1);
            for (a, b) in r0.iter().zip(&r1) {
                prop_assert!((a - b - c).abs() < 1e-12);
            }
        }

        #[test]
        fn uniform_marginals_maximize_objective(w in proptest::collection::vec(0.0f64..1.0, 5)) {
            let k = 5;
            let c = cfg(k, 1);
            let z: f64 = w.iter().sum::<f64>() + 1e-9;
            let d = Dims::new(1, k, 3);
            let dist: Vec<f64> = w.iter().flat_map(|x| {
                let v = (x + 1e-9 / 5.0) / z / 3.0;
                [v, v, v]
            }).collect();
            let probe = Flow::new(d, vec![dist]).unwrap();
            let uniform = Flow::new(d, vec![vec![1.0 / 15.0; 15]]).unwrap();
            prop_assert!(bb_objective(&c, &uniform) >= bb_objective(&c, &probe) - 1e-12);
        }
    }
}
