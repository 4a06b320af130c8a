//! Reference QSDs from the principal left eigenvector, by power iteration.
//!
//! Continuous time: iterate `ν ← νM / |νM|` with `M = I + Q̃/Λu` and
//! `Λu = 1.05 · max r(x)`; then `λ = Λu (ρ − 1)`. Discrete time: iterate
//! the substochastic `P̃` directly.

use serde::Serialize;
use thiserror::Error;

use crate::distribution::Distribution;
use crate::model::{AbsorbedChainModel, State};
use crate::zoo::{DiscreteChainModel, DEFAULT_UNIFORMIZATION_FACTOR};

pub const DEFAULT_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_MAX_ITERS: u64 = 10_000_000;

/// Successive iterates closer than this (in TV) are at rounding level and
/// count as converged whatever the contraction estimate says.
const ROUNDING_FLOOR: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("restriction is not irreducible: state {0} does not communicate with state 1")]
    NotIrreducible(State),
    #[error("transition graph has period {0}; the power iteration would oscillate")]
    Periodic(usize),
    #[error("no convergence after {iterations} iterations (last TV step {last_step:e}, eigenvalue drift {last_drift:e})")]
    NoConvergence {
        iterations: u64,
        last_step: f64,
        last_drift: f64,
    },
    #[error("truncation schedule exhausted at K = {k} with TV {last_tv:e} between the last two solutions")]
    NoStabilization { k: usize, last_tv: f64 },
    #[error("empty truncation schedule")]
    EmptySchedule,
}

#[derive(Clone, Debug, Serialize)]
pub struct QsdSolution {
    pub nu: Distribution,
    /// Principal eigenvalue: negative for `Q̃`, in `(0,1)` for `P̃`.
    pub lambda: f64,
    /// Absorption rate `Σ ν(x) q(x,0)`; equals `−λ` in continuous time and
    /// the per-step kill probability `1 − λ` in discrete time.
    pub theta: f64,
    /// `sup |νQ̃ + θν|` (continuous) or `sup |νP̃ − λν|` (discrete).
    pub residual: f64,
    #[serde(rename = "K")]
    pub truncation: usize,
    pub iterations: u64,
    /// Set when the solution is a truncation limit standing in for the
    /// minimal QSD of an infinite chain.
    pub minimal_candidate: bool,
}

/// Per-iteration diagnostics of the power method.
#[derive(Clone, Debug, Default, Serialize)]
pub struct PowerTrace {
    pub tv_steps: Vec<f64>,
    pub eigen_drifts: Vec<f64>,
}

struct SparseLeft {
    /// `inflow[y]` lists `(x, M(x,y))`.
    inflow: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
}

impl SparseLeft {
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (y, o) in out.iter_mut().enumerate() {
            let mut s = self.diag[y] * v[y];
            for &(x, m) in &self.inflow[y] {
                s += m * v[x];
            }
            *o = s;
        }
    }
}

struct PowerResult {
    v: Vec<f64>,
    rho: f64,
    iterations: u64,
}

fn power(m: &SparseLeft, tol: f64, max_iters: u64, mut trace: Option<&mut PowerTrace>) -> Result<PowerResult, OracleError> {
    let k = m.diag.len();
    let mut v = vec![1.0 / k as f64; k];
    let mut w = vec![0.0; k];
    let mut rho_prev = f64::NAN;
    let mut step_prev = f64::NAN;
    let (mut last_step, mut last_drift) = (f64::INFINITY, f64::INFINITY);
    for it in 1..=max_iters {
        m.apply(&v, &mut w);
        let rho: f64 = w.iter().sum();
        let mut step = 0.0;
        for (a, b) in w.iter_mut().zip(&v) {
            *a /= rho;
            step += (*a - b).abs();
        }
        step *= 0.5;
        std::mem::swap(&mut v, &mut w);
        let drift = (rho - rho_prev).abs();
        if let Some(t) = trace.as_deref_mut() {
            t.tv_steps.push(step);
            t.eigen_drifts.push(drift);
        }
        // distance to the limit ≈ step · r/(1−r) for contraction ratio r
        let ratio = (step / step_prev).clamp(0.0, 1.0 - 1e-9);
        let distance = if ratio.is_nan() { f64::INFINITY } else { step * ratio / (1.0 - ratio) };
        if (distance.max(step) < tol || step < ROUNDING_FLOOR) && drift < tol {
            return Ok(PowerResult { v, rho, iterations: it });
        }
        rho_prev = rho;
        step_prev = step;
        last_step = step;
        last_drift = drift;
    }
    Err(OracleError::NoConvergence {
        iterations: max_iters,
        last_step,
        last_drift,
    })
}

fn continuous_operator(model: &AbsorbedChainModel, k: usize, lu: f64) -> SparseLeft {
    let mut inflow = vec![Vec::new(); k];
    let mut diag = vec![0.0; k];
    for x in 1..=k {
        for &(y, r) in model.jumps(x).iter() {
            inflow[y - 1].push((x - 1, r / lu));
        }
        diag[x - 1] = 1.0 - model.total_rate(x) / lu;
    }
    SparseLeft { inflow, diag }
}

/// `sup_x |Σ_y q(y,x)ν(y) + θ ν(x)|` on `{1..K}`.
fn continuous_residual(model: &AbsorbedChainModel, v: &[f64], theta: f64) -> f64 {
    let k = v.len();
    let mut r: Vec<f64> = (0..k).map(|i| (theta - model.total_rate(i + 1)) * v[i]).collect();
    for x in 1..=k {
        for &(y, q) in model.jumps(x).iter() {
            r[y - 1] += q * v[x - 1];
        }
    }
    r.iter().map(|e| e.abs()).fold(0.0, f64::max)
}

/// Principal left eigenpair of `Q̃` on `{1..K}`.
pub fn solve_qsd_power(model: &AbsorbedChainModel, k: usize, tol: f64, max_iters: u64) -> Result<QsdSolution, OracleError> {
    solve_power_impl(model, k, tol, max_iters, None)
}

/// As [`solve_qsd_power`], also returning per-iteration diagnostics.
pub fn solve_qsd_power_traced(
    model: &AbsorbedChainModel,
    k: usize,
    tol: f64,
    max_iters: u64,
) -> Result<(QsdSolution, PowerTrace), OracleError> {
    let mut trace = PowerTrace::default();
    let sol = solve_power_impl(model, k, tol, max_iters, Some(&mut trace))?;
    Ok((sol, trace))
}

fn solve_power_impl(
    model: &AbsorbedChainModel,
    k: usize,
    tol: f64,
    max_iters: u64,
    trace: Option<&mut PowerTrace>,
) -> Result<QsdSolution, OracleError> {
    let view = model.finite_view(k.max(1)).model;
    let k = view.num_states().unwrap();
    view.is_irreducible_on(k).map_err(OracleError::NotIrreducible)?;
    let max = view.max_total_rate().unwrap_or(0.0);
    let lu = if max > 0.0 { DEFAULT_UNIFORMIZATION_FACTOR * max } else { 1.0 };
    let op = continuous_operator(&view, k, lu);
    let res = power(&op, tol, max_iters, trace)?;
    let lambda = lu * (res.rho - 1.0);
    let theta: f64 = (1..=k).map(|x| res.v[x - 1] * view.absorb_rate(x)).sum();
    let residual = continuous_residual(&view, &res.v, theta);
    Ok(QsdSolution {
        nu: Distribution::from_dense(&res.v).expect("Perron vector is positive"),
        lambda,
        theta,
        residual,
        truncation: k,
        iterations: res.iterations,
        minimal_candidate: false,
    })
}

/// Left Perron vector of a substochastic `P̃`.
pub fn solve_qsd_discrete(d: &DiscreteChainModel, tol: f64, max_iters: u64) -> Result<QsdSolution, OracleError> {
    d.reachability().map_err(OracleError::NotIrreducible)?;
    let period = d.period();
    if period > 1 {
        return Err(OracleError::Periodic(period));
    }
    let k = d.size();
    let mut inflow = vec![Vec::new(); k];
    let mut diag = vec![0.0; k];
    for x in 1..=k {
        for &(y, p) in d.row(x) {
            if y == x {
                diag[x - 1] += p;
            } else {
                inflow[y - 1].push((x - 1, p));
            }
        }
    }
    let op = SparseLeft { inflow, diag };
    let res = power(&op, tol, max_iters, None)?;
    let mut image = vec![0.0; k];
    op.apply(&res.v, &mut image);
    let residual = image
        .iter()
        .zip(&res.v)
        .map(|(a, b)| (a - res.rho * b).abs())
        .fold(0.0, f64::max);
    let theta: f64 = (1..=k).map(|x| res.v[x - 1] * d.kill(x)).sum();
    Ok(QsdSolution {
        nu: Distribution::from_dense(&res.v).expect("Perron vector is positive"),
        lambda: res.rho,
        theta,
        residual,
        truncation: k,
        iterations: res.iterations,
        minimal_candidate: false,
    })
}

/// Solves on increasing truncations until consecutive solutions agree
/// within `stabilization_tol` in TV. Finite models are solved once on their
/// full state space. The truncation limit is flagged as a candidate for the
/// minimal QSD.
pub fn minimal_qsd_reference(
    model: &AbsorbedChainModel,
    schedule: &[usize],
    stabilization_tol: f64,
    solver_tol: f64,
    max_iters: u64,
) -> Result<QsdSolution, OracleError> {
    if let Some(k) = model.num_states() {
        return solve_qsd_power(model, k, solver_tol, max_iters);
    }
    let mut prev: Option<QsdSolution> = None;
    let mut last_tv = f64::INFINITY;
    for &k in schedule {
        let sol = solve_qsd_power(model, k, solver_tol, max_iters)?;
        if let Some(p) = &prev {
            last_tv = p.nu.total_variation(&sol.nu);
            if last_tv < stabilization_tol {
                return Ok(QsdSolution {
                    minimal_candidate: true,
                    ..sol
                });
            }
        }
        prev = Some(sol);
    }
    match prev {
        None => Err(OracleError::EmptySchedule),
        Some(p) => Err(OracleError::NoStabilization { k: p.truncation, last_tv }),
    }
}
