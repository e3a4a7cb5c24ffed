use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use amid_core::adjoint::{amid_gradient, t_step_objective, AdjointConfig, Checkpointing};
use amid_core::autodiff::{central_differences, GradCheck};
use amid_core::design::{evaluate, train};
use amid_core::mfg::{exploitability, omd_step, population_flow, softmax_policy, EnvModel, LogPolicy};
use amid_core::nplayer::revenue_gap_study;
use amid_core::params::{read_params, write_params, ParamLayout};

use crate::config::{load_theta, Environment, RunConfig};
use crate::output::{real, Csv, Manifest};

pub struct Context_<'a> {
    pub cfg: &'a RunConfig,
    pub text: &'a str,
    pub value: serde_json::Value,
    pub seed: u64,
    pub out: &'a Path,
}

fn setup(cx: &Context_) -> Result<(Environment, Vec<f64>)> {
    let (env, default_theta) = Environment::build(&cx.cfg.environment)?;
    let theta = match &cx.cfg.theta {
        Some(path) => load_theta(path, env.model())?,
        None => default_theta,
    };
    Ok((env, theta))
}

fn policy_layout(env: &dyn EnvModel) -> ParamLayout {
    let d = env.dims();
    ParamLayout::new().with("logits", &[d.horizon, d.states, d.actions])
}

fn save_state(dir: &Path, env: &dyn EnvModel, theta: &[f64], logits: Option<&LogPolicy>) -> Result<()> {
    write_params(&dir.join("theta.params"), &env.param_layout(), theta)?;
    if let Some(z) = logits {
        write_params(&dir.join("policy.params"), &policy_layout(env), z.logits())?;
    }
    Ok(())
}

fn write_flow(dir: &Path, env: &dyn EnvModel, theta: &[f64], logits: &LogPolicy) -> Result<()> {
    let flow = population_flow(env, theta, &softmax_policy(logits)?)?;
    let d = env.dims();
    let mut csv = Csv::create(&dir.join("flow.csv"), "h,s,a,mass")?;
    for h in 0..d.horizon {
        for s in 0..d.states {
            for a in 0..d.actions {
                let mass = flow.at(h)[s * d.actions + a];
                csv.row(&[h.to_string(), s.to_string(), a.to_string(), real(mass)])?;
            }
        }
    }
    Ok(())
}

pub fn solve(cx: &Context_) -> Result<()> {
    let (env, theta) = setup(cx)?;
    let model = env.model();
    let solver = cx.cfg.solver;
    let mut csv = Csv::create(&cx.out.join("exploitability.csv"), "t,exploitability")?;
    let mut z = LogPolicy::zeros(model.dims());
    let mut last = f64::NAN;
    for t in 1..=solver.steps {
        z = omd_step(model, &theta, &z, solver.eta, solver.tau).with_context(|| format!("OMD step {t}"))?;
        last = exploitability(model, &theta, &softmax_policy(&z)?, solver.tau)?;
        csv.row(&[t.to_string(), real(last)])?;
    }
    write_flow(cx.out, model, &theta, &z)?;
    save_state(cx.out, model, &theta, Some(&z))?;
    let mut m = Manifest::new("solve", cx.text, &cx.value, cx.seed);
    m.set("final_exploitability", json!(last));
    m.write(cx.out)?;
    println!("final exploitability {}", real(last));
    Ok(())
}

pub fn design(cx: &Context_) -> Result<()> {
    let (env, theta0) = setup(cx)?;
    let model = env.model();
    let tc = cx.cfg.train_config(cx.seed);
    let mut csv = Csv::create(&cx.out.join("training_curve.csv"), "iter,objective,exploitability")?;
    let mut write_err = None;
    let outcome = train(model, &theta0, &tc, |r| {
        if write_err.is_none() {
            if let Err(e) = csv.row(&[r.iter.to_string(), real(r.objective), real(r.exploitability)]) {
                write_err = Some(e);
            }
        }
        log::info!("iter {} objective {:.6} exploitability {:.3e}", r.iter, r.objective, r.exploitability);
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let mut m = Manifest::new("design", cx.text, &cx.value, cx.seed);
    if let Some(last) = outcome.curve.last() {
        m.set("final_objective", json!(last.objective));
        m.set("final_exploitability", json!(last.exploitability));
    }
    if let Some(err) = outcome.failure {
        save_state(cx.out, model, &outcome.theta, None)?;
        m.set("status", json!(format!("aborted: {err}")));
        m.write(cx.out)?;
        bail!("training aborted: {err}");
    }
    let ev = evaluate(model, &outcome.theta, &tc.solver)?;
    save_state(cx.out, model, &outcome.theta, Some(&ev.logits))?;
    m.set("status", json!("completed"));
    m.write(cx.out)?;
    println!("final objective {}", real(ev.objective));
    Ok(())
}

pub fn simulate_n(cx: &Context_) -> Result<()> {
    let study = cx
        .cfg
        .study
        .as_ref()
        .ok_or_else(|| anyhow!("simulate-n needs a `study` block"))?;
    let (env, mut theta) = setup(cx)?;
    let Environment::Auction(auction) = &env else {
        bail!("simulate-n needs an auction environment");
    };
    if let Some(path) = &study.theta {
        theta = load_theta(path, auction)?;
    }
    let (_, logits) =
        read_params(&study.policy).with_context(|| format!("reading policy from {}", study.policy.display()))?;
    let policy = softmax_policy(&LogPolicy::new(auction.dims(), logits)?)?;
    let res = revenue_gap_study(auction, &theta, &policy, &study.sizes, study.reps, cx.seed)?;
    let mut csv = Csv::create(&cx.out.join("nstudy.csv"), "N,mean_gap,std_gap,reps")?;
    for r in &res.rows {
        csv.row(&[r.population.to_string(), real(r.mean_gap), real(r.std_gap), r.reps.to_string()])?;
    }
    let mut m = Manifest::new("simulate-n", cx.text, &cx.value, cx.seed);
    m.set("slope", json!(res.slope));
    m.set("mean_field_revenue", json!(res.mean_field_revenue));
    m.write(cx.out)?;
    match res.slope {
        Some(s) => println!("log-log slope {}", real(s)),
        None => println!("log-log slope undefined"),
    }
    Ok(())
}

pub fn gradcheck(cx: &Context_) -> Result<bool> {
    let (env, theta) = setup(cx)?;
    let model = env.model();
    let s = cx.cfg.solver;
    let mut adj = AdjointConfig::new(s.steps, s.eta, s.tau);
    if let Some(k) = cx.cfg.training.checkpoint_stride {
        adj = adj.with_checkpointing(Checkpointing::Stride(k));
    }
    let z0 = LogPolicy::zeros(model.dims());
    let res = amid_gradient(model, &theta, &z0, &adj)?;
    let (numeric, bad) = central_differences(|t| t_step_objective(model, t, &z0, &adj), &theta, cx.cfg.gradcheck.eps)?;
    let check = GradCheck::compare(res.grad_theta.clone(), numeric, bad);
    let norm = res.grad_theta.iter().map(|g| g * g).sum::<f64>().sqrt();
    let ok = check.non_finite.is_empty() && check.max_rel_error <= cx.cfg.gradcheck.tol;
    println!("max relative error {}", real(check.max_rel_error));
    println!("gradient norm {}", real(norm));
    let mut m = Manifest::new("gradcheck", cx.text, &cx.value, cx.seed);
    m.set("max_rel_error", json!(check.max_rel_error));
    m.set("gradient_norm", json!(norm));
    m.set("tolerance", json!(cx.cfg.gradcheck.tol));
    m.set("passed", json!(ok));
    m.write(cx.out)?;
    Ok(ok)
}
