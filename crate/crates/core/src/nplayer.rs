//! Finite-N batched auction simulator, used to check the mean-field model
//! against an explicit population of bidders.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::AuctionEnv;
use crate::error::{Error, Result};
use crate::mechanism::mechanism_output;
use crate::mfg::{population_flow, EnvModel, Policy};

/// Largest population [`marginal_win_prob_enum`] accepts.
pub const ENUM_MAX_AGENTS: usize = 12;

/// Winners among `bids` (indices into the slice, ascending) when `k` items
/// go to the highest bids; ties at the threshold are broken by a uniform
/// random subset.
pub fn allocate(bids: &[usize], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k > bids.len() {
        return Err(Error::Invalid(format!("{k} items for {} bidders", bids.len())));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let threshold = kth_highest(bids, k);
    let mut winners: Vec<usize> = (0..bids.len()).filter(|&i| bids[i] > threshold).collect();
    let mut tied: Vec<usize> = (0..bids.len()).filter(|&i| bids[i] == threshold).collect();
    let slots = k - winners.len();
    for j in 0..slots {
        let pick = rng.gen_range(j..tied.len());
        tied.swap(j, pick);
    }
    winners.extend_from_slice(&tied[..slots]);
    winners.sort_unstable();
    Ok(winners)
}

fn kth_highest(bids: &[usize], k: usize) -> usize {
    let mut sorted = bids.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted[k - 1]
}

/// Exact per-agent winning probability under [`allocate`], by enumerating
/// every tie-break subset. Agents with `states[i] >= values` are inactive
/// and never win.
pub fn marginal_win_prob_enum(states: &[usize], bids: &[usize], values: usize, k: usize) -> Result<Vec<f64>> {
    let n = states.len();
    if bids.len() != n {
        return Err(Error::Shape(format!("{n} states but {} bids", bids.len())));
    }
    if n > ENUM_MAX_AGENTS {
        return Err(Error::Invalid(format!(
            "enumeration supports at most {ENUM_MAX_AGENTS} agents, got {n}"
        )));
    }
    let active: Vec<usize> = (0..n).filter(|&i| states[i] < values).collect();
    if k > active.len() {
        return Err(Error::Invalid(format!("{k} items for {} active bidders", active.len())));
    }
    let mut out = vec![0.0; n];
    if k == 0 {
        return Ok(out);
    }
    let active_bids: Vec<usize> = active.iter().map(|&i| bids[i]).collect();
    let threshold = kth_highest(&active_bids, k);
    let tied: Vec<usize> = active.iter().copied().filter(|&i| bids[i] == threshold).collect();
    let above = active.iter().filter(|&&i| bids[i] > threshold).count();
    let slots = (k - above) as u32;
    let mut wins = vec![0u64; tied.len()];
    let mut outcomes = 0u64;
    for mask in 0u32..(1 << tied.len()) {
        if mask.count_ones() != slots {
            continue;
        }
        outcomes += 1;
        for (j, w) in wins.iter_mut().enumerate() {
            if mask >> j & 1 == 1 {
                *w += 1;
            }
        }
    }
    for &i in &active {
        if bids[i] > threshold {
            out[i] = 1.0;
        }
    }
    for (j, &i) in tied.iter().enumerate() {
        out[i] = wins[j] as f64 / outcomes as f64;
    }
    Ok(out)
}

/// One round of a simulated auction. Distributions are over the whole
/// population (entries are multiples of `1/N`).
#[derive(Clone, Debug, PartialEq)]
pub struct SimRound {
    pub states: Vec<usize>,
    pub bids: Vec<usize>,
    /// Agent indices, ascending.
    pub winners: Vec<usize>,
    /// States right after allocation.
    pub post_states: Vec<usize>,
    /// `L̂_h` over `S × A`.
    pub l_hat: Vec<f64>,
    /// Active bid distribution `ν̂_h`.
    pub nu_hat: Vec<f64>,
    /// Post-allocation state distribution `ξ̂_h`.
    pub xi_hat: Vec<f64>,
    /// Mechanism allocation before flooring.
    pub alloc: f64,
    pub items: usize,
    pub payments: Vec<f64>,
    /// Per-capita revenue.
    pub revenue: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTrajectory {
    pub population: usize,
    pub rounds: Vec<SimRound>,
    /// Total utility per agent.
    pub utilities: Vec<f64>,
}

impl SimTrajectory {
    /// Per-capita revenue summed over rounds.
    pub fn revenue(&self) -> f64 {
        self.rounds.iter().map(|r| r.revenue).sum()
    }

    pub fn items_sold(&self) -> usize {
        self.rounds.iter().map(|r| r.items).sum()
    }
}

/// Plays the auction with `n` agents sharing `policy`.
pub fn simulate_auction(env: &AuctionEnv, theta: &[f64], policy: &Policy, n: usize, seed: u64) -> Result<SimTrajectory> {
    if n == 0 {
        return Err(Error::Invalid("population must have at least one agent".into()));
    }
    let cfg = env.config();
    let dims = env.dims();
    if policy.dims() != dims {
        return Err(Error::Shape("policy does not match the auction".into()));
    }
    let (nv, a_n, s_n) = (cfg.values, cfg.bids, cfg.states());
    let cap = (cfg.alpha_max * n as f64).ceil() as usize;
    let w = cfg.valuation_kernel();
    let sampler = |weights: &[f64]| {
        WeightedIndex::new(weights).map_err(|e| Error::Invalid(format!("cannot sample from {weights:?}: {e}")))
    };
    let transitions = (0..s_n)
        .map(|s| sampler(&w[s * s_n..(s + 1) * s_n]))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = sampler(&cfg.mu0)?;
    let mut states: Vec<usize> = (0..n).map(|_| init.sample(&mut rng)).collect();
    let grid = cfg.value_grid();
    let inv_n = 1.0 / n as f64;
    let mut remaining = cfg.alpha_max;
    let mut sold = 0usize;
    let mut utilities = vec![0.0; n];
    let mut rounds = Vec::with_capacity(dims.horizon);

    for h in 0..dims.horizon {
        let rows = (0..s_n)
            .map(|s| sampler(policy.row(h, s)))
            .collect::<Result<Vec<_>>>()?;
        let bids: Vec<usize> = states.iter().map(|&s| rows[s].sample(&mut rng)).collect();
        let mut l_hat = vec![0.0; s_n * a_n];
        let mut nu_hat = vec![0.0; a_n];
        let mut active = Vec::new();
        for i in 0..n {
            l_hat[states[i] * a_n + bids[i]] += inv_n;
            if states[i] < nv {
                nu_hat[bids[i]] += inv_n;
                active.push(i);
            }
        }
        let mech = mechanism_output(env.mechanism().as_ref(), h, theta, &nu_hat, remaining.max(0.0))?;
        let items = ((mech.alloc * n as f64).floor().max(0.0) as usize).min(active.len());
        sold += items;
        if sold > cap {
            return Err(Error::BudgetExceeded { sold, cap });
        }
        let active_bids: Vec<usize> = active.iter().map(|&i| bids[i]).collect();
        let winners: Vec<usize> = allocate(&active_bids, items, &mut rng)?
            .into_iter()
            .map(|j| active[j])
            .collect();
        let mut post = states.clone();
        let mut revenue = 0.0;
        for &i in &winners {
            let pay = mech.payments[bids[i]];
            revenue += pay;
            utilities[i] += cfg.utility.eval(grid[states[i]] - pay, h);
            post[i] = nv;
        }
        let mut xi_hat = vec![0.0; s_n];
        for &z in &post {
            xi_hat[z] += inv_n;
        }
        let next: Vec<usize> = post.iter().map(|&z| transitions[z].sample(&mut rng)).collect();
        remaining -= mech.alloc;
        rounds.push(SimRound {
            states: std::mem::replace(&mut states, next),
            bids,
            winners,
            post_states: post,
            l_hat,
            nu_hat,
            xi_hat,
            alloc: mech.alloc,
            items,
            payments: mech.payments,
            revenue: revenue * inv_n,
        });
    }
    Ok(SimTrajectory {
        population: n,
        rounds,
        utilities,
    })
}

/// SplitMix64 finalizer over a combination of the inputs.
pub fn derive_seed(master: u64, n: u64, rep: u64) -> u64 {
    let mut z = master
        ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ rep.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, Default)]
struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapRow {
    pub population: usize,
    pub mean_gap: f64,
    pub std_gap: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapStudy {
    pub rows: Vec<GapRow>,
    /// Mean-field revenue `g_rev(θ, Λ(π))`.
    pub mean_field_revenue: f64,
    /// Least-squares slope of `log mean_gap` on `log N`; `None` when a mean
    /// gap is zero or fewer than two sizes were run.
    pub slope: Option<f64>,
}

/// Mean and sample standard deviation of `|revenue_N − g_rev|` over `reps`
/// simulations per population size.
pub fn revenue_gap_study(
    env: &AuctionEnv,
    theta: &[f64],
    policy: &Policy,
    sizes: &[usize],
    reps: usize,
    seed: u64,
) -> Result<GapStudy> {
    if reps < 2 {
        return Err(Error::Config(format!("need at least 2 replications, got {reps}")));
    }
    let flow = population_flow(env, theta, policy)?;
    let target = env.revenue(theta, &flow)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut gaps = Vec::with_capacity(reps);
        for r in 0..reps {
            let traj = simulate_auction(env, theta, policy, n, derive_seed(seed, n as u64, r as u64))?;
            gaps.push((traj.revenue() - target).abs());
        }
        let mut s = Kahan::default();
        gaps.iter().for_each(|&g| s.add(g));
        let mean = s.sum / reps as f64;
        let mut v = Kahan::default();
        gaps.iter().for_each(|&g| v.add((g - mean) * (g - mean)));
        rows.push(GapRow {
            population: n,
            mean_gap: mean,
            std_gap: (v.sum / (reps - 1) as f64).sqrt(),
            reps,
        });
    }
    let slope = log_log_slope(&rows);
    Ok(GapStudy {
        rows,
        mean_field_revenue: target,
        slope,
    })
}

fn log_log_slope(rows: &[GapRow]) -> Option<f64> {
    if rows.len() < 2 || rows.iter().any(|r| !(r.mean_gap > 0.0)) {
        return None;
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.population as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_gap.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
