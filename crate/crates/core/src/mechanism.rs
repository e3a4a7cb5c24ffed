//! Auction mechanisms: allocation fraction `α_h` and a payment per bid, as
//! tape programs of `(h, ν, r)` where `ν` is the active bid distribution and
//! `r` the remaining goods.

use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamLayout;

/// Outputs of one mechanism evaluation.
#[derive(Clone, Copy, Debug)]
pub struct MechanismVars {
    /// Scalar `α_h`.
    pub alloc: Var,
    /// One payment per bid level.
    pub payments: Var,
}

/// Plain mechanism output.
#[derive(Clone, Debug, PartialEq)]
pub struct MechanismOutput {
    pub alloc: f64,
    pub payments: Vec<f64>,
}

pub trait Mechanism: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn param_layout(&self) -> ParamLayout;

    fn evaluate(
        &self,
        tape: &mut Tape,
        h: usize,
        theta: Var,
        nu: Var,
        remaining: Var,
    ) -> Result<MechanismVars>;
}

/// Evaluates a mechanism on plain values.
pub fn mechanism_output(
    mech: &dyn Mechanism,
    h: usize,
    theta: &[f64],
    nu: &[f64],
    remaining: f64,
) -> Result<MechanismOutput> {
    if remaining < 0.0 {
        return Err(Error::Invalid(format!("remaining goods {remaining} are negative")));
    }
    let mut tape = Tape::detached();
    let th = tape.input(theta)?;
    let n = tape.input(nu)?;
    let r = tape.input(&[remaining])?;
    let out = mech.evaluate(&mut tape, h, th, n, r)?;
    Ok(MechanismOutput {
        alloc: tape.scalar(out.alloc),
        payments: tape.value(out.payments).to_vec(),
    })
}

fn bid_grid(bids: usize) -> Vec<f64> {
    (0..bids).map(|j| j as f64 / bids as f64).collect()
}

/// Residual network mechanism.
///
/// ```text
/// x   = [e_h; ν; r]
/// h1  = relu(W1 x + b1)
/// y   = relu(W2 h1 + b2 + V2 x + c2)
/// α_h = r · sigmoid(w_g·y + b_g)
/// h3  = relu(W3 y + b3) + y
/// Δ   = sigmoid(W4 h3 + b4) / (|A| − 1)
/// p   = (0, Δ1, Δ1 + Δ2, …)
/// ```
#[derive(Clone, Debug)]
pub struct NeuralMechanism {
    horizon: usize,
    bids: usize,
    hidden: usize,
    layout: ParamLayout,
}

impl NeuralMechanism {
    pub fn new(horizon: usize, bids: usize, hidden: usize) -> Result<Self> {
        if bids < 2 || hidden == 0 || horizon == 0 {
            return Err(Error::Config(
                "neural mechanism needs at least 2 bids, 1 round and 1 hidden unit".into(),
            ));
        }
        let (d, n_in) = (hidden, horizon + bids + 1);
        let layout = ParamLayout::new()
            .with("W1", &[d, n_in])
            .with("b1", &[d])
            .with("W2", &[d, d])
            .with("b2", &[d])
            .with("V2", &[d, n_in])
            .with("c2", &[d])
            .with("wg", &[d])
            .with("bg", &[])
            .with("W3", &[d, d])
            .with("b3", &[d])
            .with("W4", &[bids - 1, d])
            .with("b4", &[bids - 1]);
        Ok(Self {
            horizon,
            bids,
            hidden,
            layout,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.layout.len()];
        for seg in self.layout.segments() {
            if seg.shape.len() != 2 && seg.name != "wg" {
                continue;
            }
            let fan_in = *seg.shape.last().unwrap() as f64;
            let bound = 1.0 / fan_in.sqrt();
            for v in &mut theta[seg.range()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        theta
    }

    fn seg(&self, tape: &mut Tape, theta: Var, name: &str) -> Result<Var> {
        let s = self.layout.segment(name).expect("known segment");
        Ok(tape.slice(theta, s.offset, s.len())?)
    }

    fn affine(&self, tape: &mut Tape, theta: Var, w: &str, b: &str, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let w = self.seg(tape, theta, w)?;
        let b = self.seg(tape, theta, b)?;
        let wx = tape.matvec(w, x, rows, cols, false)?;
        Ok(tape.add(wx, b)?)
    }
}

impl Mechanism for NeuralMechanism {
    fn name(&self) -> &'static str {
        "neural"
    }

    fn param_layout(&self) -> ParamLayout {
        self.layout.clone()
    }

    fn evaluate(&self, tape: &mut Tape, h: usize, theta: Var, nu: Var, remaining: Var) -> Result<MechanismVars> {
        let (d, n_in, a_n) = (self.hidden, self.horizon + self.bids + 1, self.bids);
        let mut onehot = vec![0.0; self.horizon];
        onehot[h.min(self.horizon - 1)] = 1.0;
        let e_h = tape.constant(onehot);
        let x = tape.concat(&[e_h, nu, remaining])?;

        let pre1 = self.affine(tape, theta, "W1", "b1", x, d, n_in)?;
        let h1 = tape.relu(pre1)?;
        let pre2 = self.affine(tape, theta, "W2", "b2", h1, d, d)?;
        let skip = self.affine(tape, theta, "V2", "c2", x, d, n_in)?;
        let pre2 = tape.add(pre2, skip)?;
        let y = tape.relu(pre2)?;

        let gate = self.affine(tape, theta, "wg", "bg", y, 1, d)?;
        let gate = tape.sigmoid(gate)?;
        let alloc = tape.mul(remaining, gate)?;

        let pre3 = self.affine(tape, theta, "W3", "b3", y, d, d)?;
        let h3 = tape.relu(pre3)?;
        let h3 = tape.add(h3, y)?;
        let pre4 = self.affine(tape, theta, "W4", "b4", h3, a_n - 1, d)?;
        let inc = tape.sigmoid(pre4)?;
        let inc = tape.scale(inc, 1.0 / (a_n - 1) as f64)?;
        let zero = tape.zeros(1);
        let steps = tape.concat(&[zero, inc])?;
        let payments = tape.cumsum(steps, false, false)?;
        Ok(MechanismVars { alloc, payments })
    }
}

/// Bid-independent schedule `α_h = α_max·softmax(θ2)_h` with payments
/// `p_h(a) = sigmoid(θ1_{h,a})·a`.
#[derive(Clone, Debug)]
pub struct StaticMechanism {
    horizon: usize,
    bids: usize,
    alpha_max: f64,
}

impl StaticMechanism {
    pub fn new(horizon: usize, bids: usize, alpha_max: f64) -> Self {
        Self {
            horizon,
            bids,
            alpha_max,
        }
    }
}

impl Mechanism for StaticMechanism {
    fn name(&self) -> &'static str {
        "static"
    }

    fn param_layout(&self) -> ParamLayout {
        ParamLayout::new()
            .with("payment", &[self.horizon, self.bids])
            .with("schedule", &[self.horizon])
    }

    fn evaluate(&self, tape: &mut Tape, h: usize, theta: Var, _nu: Var, _remaining: Var) -> Result<MechanismVars> {
        let a_n = self.bids;
        let logits = tape.slice(theta, self.horizon * a_n, self.horizon)?;
        let share = tape.softmax_rows(logits, self.horizon)?;
        let share = tape.slice(share, h, 1)?;
        let alloc = tape.scale(share, self.alpha_max)?;
        let raw = tape.slice(theta, h * a_n, a_n)?;
        let frac = tape.sigmoid(raw)?;
        let grid = tape.constant(bid_grid(a_n));
        let payments = tape.mul(frac, grid)?;
        Ok(MechanismVars { alloc, payments })
    }
}

/// First-price baseline: `α_h = α_max/H` and each winner pays its bid.
#[derive(Clone, Debug)]
pub struct FirstPrice {
    horizon: usize,
    bids: usize,
    alpha_max: f64,
}

impl FirstPrice {
    pub fn new(horizon: usize, bids: usize, alpha_max: f64) -> Self {
        Self {
            horizon,
            bids,
            alpha_max,
        }
    }
}

impl Mechanism for FirstPrice {
    fn name(&self) -> &'static str {
        "first_price"
    }

    fn param_layout(&self) -> ParamLayout {
        ParamLayout::new()
    }

    fn evaluate(&self, tape: &mut Tape, _h: usize, _theta: Var, _nu: Var, _remaining: Var) -> Result<MechanismVars> {
        let alloc = tape.constant(vec![self.alpha_max / self.horizon as f64]);
        let payments = tape.constant(bid_grid(self.bids));
        Ok(MechanismVars { alloc, payments })
    }
}
