//! One runner per method. Each turns validated parameters into a
//! [`Payload`]; nothing here touches the filesystem.

use anyhow::{anyhow, bail, Context, Result};
use qsd_core::afp::afp_run;
use qsd_core::branching::{build_shifted, ks_estimate, AlphaChoice, KsSettings};
use qsd_core::distribution::Distribution;
use qsd_core::flow::{evolve_conditioned, evolve_conditioned_with, theta_of, ConditionedPath, FlowOptions};
use qsd_core::fv::{uniform_grid, FvSimulator, ParticleConfig};
use qsd_core::graphical::coupling_experiment;
use qsd_core::model::{AbsorbedChainModel, State};
use qsd_core::oracle::{
    minimal_qsd_reference, solve_qsd_discrete, solve_qsd_power, QsdSolution, DEFAULT_MAX_ITERS,
};
use qsd_core::replicas::{mean_se, run_replicas};
use qsd_core::return_process::phi_map;
use qsd_core::rng::{purpose, RngStream};
use qsd_core::simulate::DEFAULT_EVENT_CAP;
use qsd_core::zoo;
use serde::Serialize;
use serde_json::json;

use crate::config::{
    AfpParams, AlphaSetting, BranchParams, ConditionedParams, CoupleParams, DistSpec, FvParams, OracleParams,
    PhiParams, ScanParams,
};
use crate::fit::rate_fit;
use crate::output::{csv_bytes, json_bytes, Payload, PlotSpec};

/// Truncations tried when an infinite chain needs a reference QSD.
pub const DEFAULT_SCHEDULE: &[usize] = &[50, 100, 200, 400, 800, 1600];
/// Truncation used for conditioned flows of infinite chains.
pub const DEFAULT_FLOW_TRUNCATION: usize = 200;
/// Finite chains up to this size get an oracle comparison.
const ORACLE_LIMIT: usize = 5000;

/// Principal QSD: solved directly for finite chains, as the stabilized
/// truncation limit otherwise.
pub fn reference_qsd(model: &AbsorbedChainModel, stabilization: f64) -> Result<QsdSolution> {
    let sol = match model.num_states() {
        Some(k) => solve_qsd_power(model, k, 1e-12, DEFAULT_MAX_ITERS),
        None => minimal_qsd_reference(model, DEFAULT_SCHEDULE, stabilization, 1e-12, DEFAULT_MAX_ITERS),
    };
    sol.context("reference QSD")
}

fn optional_reference(model: &AbsorbedChainModel) -> Option<QsdSolution> {
    match model.num_states() {
        Some(k) if k <= ORACLE_LIMIT => reference_qsd(model, 1e-6).ok(),
        _ => None,
    }
}

pub fn resolve_init(model: &AbsorbedChainModel, spec: &DistSpec) -> Result<Distribution> {
    match spec.concrete() {
        Some(d) => {
            let d = d.map_err(|e| anyhow!("initial law `{spec}`: {e}"))?;
            if let Some(x) = d.support().find(|&x| !model.contains(x)) {
                bail!("initial law `{spec}` charges state {x} outside the model");
            }
            Ok(d)
        }
        None => Ok(reference_qsd(model, 1e-6)?.nu),
    }
}

fn flow_truncation(model: &AbsorbedChainModel, trunc: Option<usize>) -> usize {
    trunc.or(model.num_states()).unwrap_or(DEFAULT_FLOW_TRUNCATION)
}

#[derive(Serialize)]
struct StateMass {
    state: State,
    mass: f64,
}

pub fn oracle(model: &AbsorbedChainModel, p: &OracleParams) -> Result<Payload> {
    let sol = match (model.num_states(), p.trunc) {
        (Some(k), t) => solve_qsd_power(model, t.map_or(k, |t| t.min(k)), p.tol, DEFAULT_MAX_ITERS),
        (None, Some(t)) => solve_qsd_power(model, t, p.tol, DEFAULT_MAX_ITERS),
        (None, None) => minimal_qsd_reference(model, DEFAULT_SCHEDULE, p.stabilization, p.tol, DEFAULT_MAX_ITERS),
    }
    .context("oracle")?;
    let rows: Vec<StateMass> = sol.nu.iter().map(|(state, mass)| StateMass { state, mass }).collect();
    Ok(Payload {
        csv: csv_bytes(&rows),
        columns: vec!["state", "mass"],
        json: json_bytes(&sol),
        plot: Some(PlotSpec {
            title: format!("QSD of {}", model.label()),
            x: "state",
            y: "mass",
            log_x: false,
            log_y: true,
            group_by: None,
            categorical: false,
        }),
        stats: json!({ "iterations": sol.iterations }),
    })
}

#[derive(Serialize)]
struct TimeStateMass {
    t: f64,
    state: State,
    mass: f64,
}

pub fn conditioned(model: &AbsorbedChainModel, p: &ConditionedParams) -> Result<Payload> {
    let init = resolve_init(model, &p.init)?;
    let k = flow_truncation(model, p.trunc);
    let opts = FlowOptions {
        self_check: true,
        ..FlowOptions::default()
    };
    let path = evolve_conditioned_with(model, &init, p.horizon, p.dt, k, opts).context("conditioned flow")?;
    let mut rows = Vec::new();
    for (i, &t) in path.times().iter().enumerate() {
        for (state, mass) in path.distribution(i).iter() {
            rows.push(TimeStateMass { t, state, mass });
        }
    }
    let doc = json!({
        "init": init,
        "horizon": path.horizon(),
        "K": path.truncation(),
        "steps": path.times().len() - 1,
        "terminal": path.terminal(),
        "max_renormalization": path.max_renormalization(),
        "richardson_estimate": path.richardson_estimate(),
    });
    Ok(Payload {
        csv: csv_bytes(&rows),
        columns: vec!["t", "state", "mass"],
        json: json_bytes(&doc),
        plot: Some(PlotSpec {
            title: format!("conditioned law on {}", model.label()),
            x: "t",
            y: "mass",
            log_x: false,
            log_y: false,
            group_by: Some("state"),
            categorical: false,
        }),
        stats: json!({ "grid_points": path.times().len() }),
    })
}

#[derive(Serialize)]
struct FvRow {
    replica: u64,
    t: f64,
    state: State,
    mass: f64,
}

struct FvReplica {
    trace: Vec<Distribution>,
    stationary: Option<Distribution>,
    events: u64,
    revivals: u64,
    null_revivals: u64,
}

fn fv_replica(
    model: &AbsorbedChainModel,
    init: &Distribution,
    p: &FvParams,
    grid: &[f64],
    rng: &RngStream,
) -> Result<FvReplica> {
    let cfg = ParticleConfig::sample(model, init, p.particles, &mut rng.child(purpose::INITIAL))?;
    let mut dyn_rng = rng.child(purpose::DYNAMICS);
    let mut sim = FvSimulator::new(model, cfg).with_event_cap(u64::MAX);
    let mut burn = p.burnin;
    let mut trace = Vec::with_capacity(grid.len());
    for &t in grid {
        if let Some(b) = burn.filter(|&b| b <= t) {
            sim.advance_to(b, &mut dyn_rng)?;
            sim.arm_occupation();
            burn = None;
        }
        sim.advance_to(t, &mut dyn_rng)?;
        trace.push(sim.config().empirical());
    }
    let stationary = match p.burnin {
        Some(_) => Some(sim.occupation_average()?),
        None => None,
    };
    Ok(FvReplica {
        trace,
        stationary,
        events: sim.events(),
        revivals: sim.revivals(),
        null_revivals: sim.null_revivals(),
    })
}

pub fn fv(model: &AbsorbedChainModel, p: &FvParams, replicas: usize, root: &RngStream) -> Result<Payload> {
    let init = resolve_init(model, &p.init)?;
    let grid = uniform_grid(p.horizon, p.grid);
    let runs = run_replicas(root, replicas, |_, rng| fv_replica(model, &init, p, &grid, &rng))
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .context("Fleming-Viot run")?;

    let mut rows = Vec::new();
    for (r, run) in runs.iter().enumerate() {
        for (&t, m) in grid.iter().zip(&run.trace) {
            for (state, mass) in m.iter() {
                rows.push(FvRow {
                    replica: r as u64,
                    t,
                    state,
                    mass,
                });
            }
        }
    }

    // conditioned-flow reference at the grid times
    let flow = if model.num_states().is_some() || p.trunc.is_some() {
        Some(evolve_conditioned(model, &init, p.horizon, p.grid.min(1e-2), flow_truncation(model, p.trunc)))
    } else {
        None
    };
    let (mean_tv, reference_error) = match flow {
        Some(Ok(path)) => {
            let tv: Vec<f64> = grid
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let reference = Distribution::from_dense(&path.density_at(t)).unwrap();
                    runs.iter().map(|r| r.trace[i].total_variation(&reference)).sum::<f64>() / runs.len() as f64
                })
                .collect();
            (Some(tv), None)
        }
        Some(Err(e)) => (None, Some(e.to_string())),
        None => (None, None),
    };

    let stationary = match p.burnin {
        Some(burnin) => {
            let reference = reference_qsd(model, 1e-6)?;
            let estimates: Vec<&Distribution> = runs.iter().map(|r| r.stationary.as_ref().unwrap()).collect();
            let tv: Vec<f64> = estimates.iter().map(|m| m.total_variation(&reference.nu)).collect();
            let k = estimates.iter().map(|m| m.max_state()).max().unwrap();
            let mut avg = vec![0.0; k];
            for m in &estimates {
                for (x, w) in m.iter() {
                    avg[x - 1] += w / estimates.len() as f64;
                }
            }
            let avg = Distribution::from_dense(&avg).unwrap();
            let (mean, se) = mean_se(&tv);
            Some(json!({
                "burnin": burnin,
                "reference": reference.nu,
                "reference_K": reference.truncation,
                "tv_per_replica": tv,
                "mean_tv": mean,
                "mean_tv_se": se,
                "average": avg,
                "tv_of_average": avg.total_variation(&reference.nu),
            }))
        }
        None => None,
    };

    let events: u64 = runs.iter().map(|r| r.events).sum();
    let revivals: u64 = runs.iter().map(|r| r.revivals).sum();
    let null_revivals: u64 = runs.iter().map(|r| r.null_revivals).sum();
    let doc = json!({
        "particles": p.particles,
        "replicas": replicas,
        "horizon": p.horizon,
        "init": init,
        "grid": grid,
        "mean_tv_to_flow": mean_tv,
        "final_mean_tv_to_flow": mean_tv.as_ref().map(|v| *v.last().unwrap()),
        "reference_error": reference_error,
        "stationary": stationary,
        "events": events,
        "revivals": revivals,
        "null_revivals": null_revivals,
    });
    Ok(Payload {
        csv: csv_bytes(&rows),
        columns: vec!["replica", "t", "state", "mass"],
        json: json_bytes(&doc),
        plot: Some(PlotSpec {
            title: format!("FV empirical measures, N = {}", p.particles),
            x: "t",
            y: "mass",
            log_x: false,
            log_y: false,
            group_by: Some("state"),
            categorical: false,
        }),
        stats: json!({ "events": events, "revivals": revivals }),
    })
}

#[derive(Serialize)]
struct PhiRow {
    iteration: usize,
    tv_step: f64,
    tv_to_oracle: Option<f64>,
}

pub fn phi(model: &AbsorbedChainModel, p: &PhiParams) -> Result<Payload> {
    let mut mu = resolve_init(model, &p.init)?;
    let oracle = optional_reference(model);
    let mut rows = Vec::new();
    let mut converged = false;
    for iteration in 1..=p.iters {
        let next = phi_map(model, &mu).with_context(|| format!("phi map at iteration {iteration}"))?;
        let tv_step = next.total_variation(&mu);
        mu = next;
        rows.push(PhiRow {
            iteration,
            tv_step,
            tv_to_oracle: oracle.as_ref().map(|o| o.nu.total_variation(&mu)),
        });
        if tv_step < p.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        bail!(
            "phi iteration did not reach TV step {} within {} iterations (last {})",
            p.tol,
            p.iters,
            rows.last().unwrap().tv_step
        );
    }
    let doc = json!({
        "iterations": rows.len(),
        "last": mu,
        "log": rows.iter().map(|r| r.tv_step).collect::<Vec<_>>(),
        "tv_to_oracle": rows.last().unwrap().tv_to_oracle,
        "oracle": oracle.as_ref().map(|o| &o.nu),
    });
    Ok(Payload {
        csv: csv_bytes(&rows),
        columns: vec!["iteration", "tv_step", "tv_to_oracle"],
        json: json_bytes(&doc),
        plot: Some(PlotSpec {
            title: "phi iteration".into(),
            x: "iteration",
            y: "tv_step",
            log_x: false,
            log_y: true,
            group_by: None,
            categorical: false,
        }),
        stats: json!({ "iterations": rows.len() }),
    })
}

pub fn couple(model: &AbsorbedChainModel, p: &CoupleParams, replicas: usize, root: &RngStream) -> Result<Payload> {
    let mu = resolve_init(model, &p.init)?;
    let path = evolve_conditioned(model, &mu, p.horizon, p.dt, flow_truncation(model, p.trunc)).context("conditioned flow")?;
    let s = coupling_experiment(model, &path, p.particles, &mu, p.horizon, replicas, root, DEFAULT_EVENT_CAP)
        .context("coupled run")?;
    let doc = json!({
        "particles": s.particles,
        "replicas": s.replicas,
        "horizon": p.horizon,
        "init": mu,
        "psi_rate": s.psi_rate,
        "psi_se": s.psi_se,
        "initial_mismatch_rate": s.initial_mismatch_rate,
        "bound": s.bound,
        "bound_se": s.bound_se,
    });
    Ok(Payload {
        csv: csv_bytes(&s.records),
        columns: vec![
            "replica",
            "psi",
            "divergence_time",
            "initial_mismatch",
            "discrepancy",
            "trajectories_agree",
        ],
        json: json_bytes(&doc),
        plot: Some(PlotSpec {
            title: format!("discrepancy per replica, N = {}", p.particles),
            x: "replica",
            y: "discrepancy",
            log_x: false,
            log_y: false,
            group_by: None,
            categorical: false,
        }),
        stats: json!({ "psi_rate": s.psi_rate }),
    })
}

#[derive(Serialize)]
struct AfpRow {
    replica: u64,
    checkpoint: u64,
    state: State,
    mass: f64,
    tv_to_oracle: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn afp(model: &AbsorbedChainModel, p: &AfpParams, replicas: usize, root: &RngStream) -> Result<Payload> {
    let d = zoo::uniformize(model, p.uniformization_rate).context("uniformization")?;
    let oracle = (d.size() <= ORACLE_LIMIT)
        .then(|| solve_qsd_discrete(&d, 1e-13, DEFAULT_MAX_ITERS).ok())
        .flatten();
    let reference = oracle.as_ref().map(|o| &o.nu);
    let runs = run_replicas(root, replicas, |_, mut rng| {
        afp_run(&d, p.start, p.steps, p.checkpoints, reference, &mut rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .context("history-renewal run")?;
    let mut rows = Vec::new();
    for (r, run) in runs.iter().enumerate() {
        for c in &run.checkpoints {
            for (state, mass) in c.estimate.iter() {
                rows.push(AfpRow {
                    replica: r as u64,
                    checkpoint: c.step,
                    state,
                    mass,
                    tv_to_oracle: c.tv_to_reference,
                });
            }
        }
    }
    let checkpoints: Vec<serde_json::Value> = (0..runs[0].checkpoints.len())
        .map(|i| {
            let tv: Option<Vec<f64>> = runs.iter().map(|r| r.checkpoints[i].tv_to_reference).collect();
            json!({
                "step": runs[0].checkpoints[i].step,
                "median_tv": tv.as_ref().map(|v| median(v.clone())),
                "max_tv": tv.as_ref().map(|v| v.iter().copied().fold(0.0, f64::max)),
            })
        })
        .collect();
    let doc = json!({
        "uniformization_rate": d.uniformization_rate(),
        "steps": p.steps,
        "start": p.start,
        "replicas": replicas,
        "oracle": reference,
        "checkpoints": checkpoints,
        "final_estimates": runs.iter().map(|r| &r.estimate).collect::<Vec<_>>(),
    });
    Ok(Payload {
        csv: csv_bytes(&rows),
        columns: vec!["replica", "checkpoint", "state", "mass", "tv_to_oracle"],
        json: json_bytes(&doc),
        plot: Some(PlotSpec {
            title: "history-renewal TV to oracle".into(),
            x: "checkpoint",
            y: "tv_to_oracle",
            log_x: true,
            log_y: true,
            group_by: Some("replica"),
            categorical: false,
        }),
        stats: json!({ "steps": p.steps * replicas as u64 }),
    })
}

pub fn branch(model: &AbsorbedChainModel, p: &BranchParams, replicas: usize, root: &RngStream) -> Result<Payload> {
    let choice = match p.alpha {
        AlphaSetting::Auto => AlphaChoice::Auto,
        AlphaSetting::Fixed(a) => AlphaChoice::Fixed(a),
    };
    let sm = build_shifted(model, choice).context("shifted mean matrix")?;
    let settings = KsSettings {
        horizon: p.horizon,
        cap: p.cap,
        replicas,
        restarts: p.restarts,
        start: p.start,
    };
    let est = ks_estimate(&sm, settings, root).context("branching estimate")?;
    let oracle = optional_reference(model);
    let doc = json!({
        "alpha": est.alpha,
        "lambda_alpha": sm.lambda_alpha,
        "supercritical": sm.supercritical,
        "nu_hat": est.nu_hat,
        "survival_fraction": est.survival_fraction,
        "growth_rate_fit": est.growth_rate_fit,
        "growth_rate_se": est.growth_rate_se,
        "theta_from_growth": est.theta_from_growth,
        "theta_from_profile": theta_of(model, &est.nu_hat),
        "cap_events": est.cap_events,
        "tv_to_oracle": oracle.as_ref().map(|o| o.nu.total_variation(&est.nu_hat)),
    });
    Ok(Payload {
        csv: csv_bytes(&est.replicas.iter().map(BranchRow::from).collect::<Vec<_>>()),
        columns: vec!["replica", "attempts", "survived", "growth", "cap_events"],
        json: json_bytes(&doc),
        plot: Some(PlotSpec {
            title: "fitted growth per replica".into(),
            x: "replica",
            y: "growth",
            log_x: false,
            log_y: false,
            group_by: None,
            categorical: false,
        }),
        stats: json!({ "cap_events": est.cap_events }),
    })
}

#[derive(Serialize)]
struct BranchRow {
    replica: u64,
    attempts: u64,
    survived: bool,
    growth: Option<f64>,
    cap_events: u64,
}

impl From<&qsd_core::branching::BranchReplica> for BranchRow {
    fn from(r: &qsd_core::branching::BranchReplica) -> Self {
        Self {
            replica: r.replica,
            attempts: r.attempts,
            survived: r.survived,
            growth: r.growth,
            cap_events: r.cap_events,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanRow {
    pub particles: usize,
    pub replicas: usize,
    /// Replica mean of `|m(x, ξ(T)) − T_Tμ(x)|`.
    pub mean_abs_error: f64,
    pub mean_abs_error_se: f64,
    /// `|E m(x, ξ(T)) − T_Tμ(x)|` estimated by the replica mean.
    pub bias: f64,
    pub bias_se: f64,
    /// `e^{5CT} · 3/√N`, absent when `C` is infinite.
    pub bound: Option<f64>,
}

/// Final occupation fraction of `state` over replicas of the `N`-particle
/// system.
pub fn fv_fractions(
    model: &AbsorbedChainModel,
    init: &Distribution,
    n: usize,
    horizon: f64,
    state: State,
    replicas: usize,
    root: &RngStream,
) -> Result<Vec<f64>> {
    run_replicas(root, replicas, |_, rng| -> Result<f64> {
        let cfg = ParticleConfig::sample(model, init, n, &mut rng.child(purpose::INITIAL))?;
        let mut sim = FvSimulator::new(model, cfg).with_event_cap(u64::MAX);
        sim.advance_to(horizon, &mut rng.child(purpose::DYNAMICS))?;
        Ok(sim.config().count(state) as f64 / n as f64)
    })
    .into_iter()
    .collect()
}

pub fn scan_rows(
    model: &AbsorbedChainModel,
    p: &ScanParams,
    replicas: usize,
    root: &RngStream,
) -> Result<(Vec<ScanRow>, ConditionedPath)> {
    let init = resolve_init(model, &p.init)?;
    let path = evolve_conditioned(model, &init, p.horizon, p.dt, flow_truncation(model, p.trunc)).context("conditioned flow")?;
    let target = path.terminal().mass(p.state);
    let c = model.bounds().column;
    let mut rows = Vec::new();
    for &n in &p.particles {
        let m = fv_fractions(model, &init, n, p.horizon, p.state, replicas, &root.child(n as u64))
            .with_context(|| format!("Fleming-Viot with N = {n}"))?;
        let abs: Vec<f64> = m.iter().map(|v| (v - target).abs()).collect();
        let (mean_abs_error, mean_abs_error_se) = mean_se(&abs);
        let (mean, bias_se) = mean_se(&m);
        rows.push(ScanRow {
            particles: n,
            replicas,
            mean_abs_error,
            mean_abs_error_se,
            bias: (mean - target).abs(),
            bias_se,
            bound: c.map(|c| (5.0 * c * p.horizon).exp() * 3.0 / (n as f64).sqrt()),
        });
    }
    Ok((rows, path))
}

pub fn scan(model: &AbsorbedChainModel, p: &ScanParams, replicas: usize, root: &RngStream) -> Result<Payload> {
    let (rows, path) = scan_rows(model, p, replicas, root)?;
    let fit = rate_fit(&rows.iter().map(|r| (r.particles, r.mean_abs_error)).collect::<Vec<_>>());
    let doc = json!({
        "state": p.state,
        "horizon": p.horizon,
        "target": path.terminal().mass(p.state),
        "rows": rows,
        "fit": fit.as_ref().ok(),
        "fit_error": fit.as_ref().err().map(|e| e.to_string()),
    });
    Ok(Payload {
        csv: csv_bytes(&rows),
        columns: vec![
            "particles",
            "replicas",
            "mean_abs_error",
            "mean_abs_error_se",
            "bias",
            "bias_se",
            "bound",
        ],
        json: json_bytes(&doc),
        plot: Some(PlotSpec {
            title: "FV error against N".into(),
            x: "particles",
            y: "mean_abs_error",
            log_x: true,
            log_y: true,
            group_by: None,
            categorical: false,
        }),
        stats: json!({ "sizes": p.particles.len() }),
    })
}
