//! The conditioned evolution `T_tμ` and the QSD fixed-point residual.
//!
//! `u = T_tμ` solves the nonlinear forward equation
//!
//! ```text
//! d/dt u(x) = Σ_y q(y,x) u(y) + (Σ_y q(y,0) u(y)) u(x)
//! ```
//!
//! where the sum over `y` includes the diagonal `q(x,x) = -r(x)`. It is
//! integrated with classical RK4 on a truncation `{1..K}`.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::distribution::Distribution;
use crate::model::{AbsorbedChainModel, State};

/// Internal substeps are kept below this multiple of `1 / max rate`.
pub const STABILITY_FRACTION: f64 = 0.1;
/// Negative mass below this before clipping aborts integration.
pub const NEGATIVE_MASS_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("step and horizon must be positive and finite")]
    BadStep,
    #[error("initial state {state} lies outside the truncation 1..={k}")]
    OutsideTruncation { state: State, k: usize },
    #[error("mass {mass} at the truncation boundary by t = {time}; increase K")]
    TruncationLeak { time: f64, mass: f64 },
    #[error("mass {mass} at state {state} went negative at t = {time}")]
    StepUnstable { time: f64, state: State, mass: f64 },
    #[error("total mass vanished at t = {time}")]
    Degenerate { time: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowOptions {
    /// Re-integrate with half the step and report the Richardson estimate.
    pub self_check: bool,
    pub leak_tolerance: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            self_check: false,
            leak_tolerance: 1e-6,
        }
    }
}

/// `T_tμ` on a grid `0 = t_0 < ... < t_M = T`, stored densely on `{1..K}`.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionedPath {
    times: Vec<f64>,
    masses: Vec<Vec<f64>>,
    k: usize,
    max_renormalization: f64,
    richardson: Option<f64>,
}

impl ConditionedPath {
    /// A path that stays at `nu` on `[0, horizon]`.
    pub fn constant(nu: &Distribution, horizon: f64) -> Self {
        let k = nu.max_state();
        let v = nu.to_dense(k);
        Self {
            times: vec![0.0, horizon],
            masses: vec![v.clone(), v],
            k,
            max_renormalization: 0.0,
            richardson: None,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn truncation(&self) -> usize {
        self.k
    }

    /// Dense masses at grid index `i`; entry `j` is state `j + 1`.
    pub fn dense(&self, i: usize) -> &[f64] {
        &self.masses[i]
    }

    pub fn distribution(&self, i: usize) -> Distribution {
        Distribution::from_dense(&self.masses[i]).expect("path entries are normalized")
    }

    pub fn terminal(&self) -> Distribution {
        self.distribution(self.times.len() - 1)
    }

    /// Largest `|Σu − 1|` removed by renormalization over all substeps.
    pub fn max_renormalization(&self) -> f64 {
        self.max_renormalization
    }

    /// `‖u_h − u_{h/2}‖∞ / 15` at the horizon when the self-check ran.
    pub fn richardson_estimate(&self) -> Option<f64> {
        self.richardson
    }

    fn bracket(&self, t: f64) -> (usize, f64) {
        let n = self.times.len();
        if t <= self.times[0] {
            return (0, 0.0);
        }
        if t >= self.times[n - 1] {
            return (n - 2, 1.0);
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        let (a, b) = (self.times[i], self.times[i + 1]);
        (i, (t - a) / (b - a))
    }

    /// Mass of `x` at time `t`, linear in `t` between grid points.
    pub fn mass_at(&self, t: f64, x: State) -> f64 {
        if x == 0 || x > self.k {
            return 0.0;
        }
        if self.times.len() == 1 {
            return self.masses[0][x - 1];
        }
        let (i, s) = self.bracket(t);
        (1.0 - s) * self.masses[i][x - 1] + s * self.masses[i + 1][x - 1]
    }

    /// Interpolated density at time `t` on `{1..K}`.
    pub fn density_at(&self, t: f64) -> Vec<f64> {
        (1..=self.k).map(|x| self.mass_at(t, x)).collect()
    }

    /// State whose interval, in the ordered partition of `[0,1)` by the
    /// interpolated `T_tμ`, contains `v`.
    pub fn locate_at(&self, t: f64, v: f64) -> State {
        let mut acc = 0.0;
        let mut last = 1;
        for x in 1..=self.k {
            let m = self.mass_at(t, x);
            if m > 0.0 {
                acc += m;
                last = x;
                if v < acc {
                    return x;
                }
            }
        }
        last
    }
}

/// Sparse reverse adjacency of the truncated generator.
struct Generator {
    inflow: Vec<Vec<(usize, f64)>>,
    total: Vec<f64>,
    absorb: Vec<f64>,
}

impl Generator {
    fn new(model: &AbsorbedChainModel, k: usize) -> Self {
        let mut inflow = vec![Vec::new(); k];
        let mut total = vec![0.0; k];
        let mut absorb = vec![0.0; k];
        for x in 1..=k {
            for &(y, r) in model.jumps(x).iter() {
                inflow[y - 1].push((x - 1, r));
            }
            total[x - 1] = model.total_rate(x);
            absorb[x - 1] = model.absorb_rate(x);
        }
        Self { inflow, total, absorb }
    }

    fn rhs(&self, u: &[f64], out: &mut [f64]) {
        let a: f64 = u.iter().zip(&self.absorb).map(|(m, q)| m * q).sum();
        for (x, o) in out.iter_mut().enumerate() {
            let mut s = (a - self.total[x]) * u[x];
            for &(y, r) in &self.inflow[x] {
                s += r * u[y];
            }
            *o = s;
        }
    }
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(k: usize) -> Self {
        Self {
            k1: vec![0.0; k],
            k2: vec![0.0; k],
            k3: vec![0.0; k],
            k4: vec![0.0; k],
            tmp: vec![0.0; k],
        }
    }

    fn step(&mut self, g: &Generator, u: &mut [f64], h: f64) {
        g.rhs(u, &mut self.k1);
        for i in 0..u.len() {
            self.tmp[i] = u[i] + 0.5 * h * self.k1[i];
        }
        g.rhs(&self.tmp, &mut self.k2);
        for i in 0..u.len() {
            self.tmp[i] = u[i] + 0.5 * h * self.k2[i];
        }
        g.rhs(&self.tmp, &mut self.k3);
        for i in 0..u.len() {
            self.tmp[i] = u[i] + h * self.k3[i];
        }
        g.rhs(&self.tmp, &mut self.k4);
        for i in 0..u.len() {
            u[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

struct Integration {
    times: Vec<f64>,
    masses: Vec<Vec<f64>>,
    max_renorm: f64,
}

fn integrate(
    model: &AbsorbedChainModel,
    boundary: &[State],
    start: Vec<f64>,
    horizon: f64,
    step: f64,
    leak_tolerance: f64,
) -> Result<Integration, FlowError> {
    let k = start.len();
    let g = Generator::new(model, k);
    let max_rate = g.total.iter().copied().fold(0.0, f64::max);
    let intervals = (horizon / step).ceil().max(1.0) as usize;
    let h = horizon / intervals as f64;
    let sub = if max_rate > 0.0 {
        (h * max_rate / STABILITY_FRACTION).ceil().max(1.0) as usize
    } else {
        1
    };
    let dt = h / sub as f64;

    let leak = |u: &[f64], time: f64| -> Result<(), FlowError> {
        let mass: f64 = boundary.iter().map(|&x| u[x - 1]).sum();
        if mass > leak_tolerance {
            return Err(FlowError::TruncationLeak { time, mass });
        }
        Ok(())
    };

    let mut u = start;
    leak(&u, 0.0)?;
    let mut rk = Rk4::new(k);
    let mut times = Vec::with_capacity(intervals + 1);
    let mut masses = Vec::with_capacity(intervals + 1);
    times.push(0.0);
    masses.push(u.clone());
    let mut max_renorm = 0.0f64;
    for i in 1..=intervals {
        for j in 0..sub {
            rk.step(&g, &mut u, dt);
            let time = ((i - 1) * sub + j + 1) as f64 * dt;
            let mut total = 0.0;
            for (x, m) in u.iter_mut().enumerate() {
                if *m < 0.0 {
                    if *m < -NEGATIVE_MASS_TOLERANCE {
                        return Err(FlowError::StepUnstable { time, state: x + 1, mass: *m });
                    }
                    *m = 0.0;
                }
                total += *m;
            }
            if total <= 0.0 || !total.is_finite() {
                return Err(FlowError::Degenerate { time });
            }
            max_renorm = max_renorm.max((total - 1.0).abs());
            for m in u.iter_mut() {
                *m /= total;
            }
        }
        let time = if i == intervals { horizon } else { i as f64 * h };
        leak(&u, time)?;
        times.push(time);
        masses.push(u.clone());
    }
    Ok(Integration { times, masses, max_renorm })
}

/// Integrates `T_tμ` on `[0, horizon]` with output every `step` (rounded
/// down so the grid ends exactly at the horizon). Substeps are refined so
/// that each is at most `0.1 / max rate`.
pub fn evolve_conditioned(
    model: &AbsorbedChainModel,
    mu: &Distribution,
    horizon: f64,
    step: f64,
    truncation: usize,
) -> Result<ConditionedPath, FlowError> {
    evolve_conditioned_with(model, mu, horizon, step, truncation, FlowOptions::default())
}

pub fn evolve_conditioned_with(
    model: &AbsorbedChainModel,
    mu: &Distribution,
    horizon: f64,
    step: f64,
    truncation: usize,
    opts: FlowOptions,
) -> Result<ConditionedPath, FlowError> {
    if !(step > 0.0 && step.is_finite() && horizon > 0.0 && horizon.is_finite()) {
        return Err(FlowError::BadStep);
    }
    let view = model.finite_view(truncation);
    let k = view.model.num_states().unwrap_or(truncation);
    if mu.max_state() > k {
        return Err(FlowError::OutsideTruncation { state: mu.max_state(), k });
    }
    let start = mu.to_dense(k);
    let run = integrate(&view.model, &view.boundary, start.clone(), horizon, step, opts.leak_tolerance)?;
    let richardson = if opts.self_check {
        let fine = integrate(&view.model, &view.boundary, start, horizon, step / 2.0, opts.leak_tolerance)?;
        let a = run.masses.last().unwrap();
        let b = fine.masses.last().unwrap();
        Some(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / 15.0)
    } else {
        None
    };
    Ok(ConditionedPath {
        times: run.times,
        masses: run.masses,
        k,
        max_renormalization: run.max_renorm,
        richardson,
    })
}

/// Residual of the QSD equation on the support of `mu` and its one-step
/// neighbourhood.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualVector {
    pub entries: Vec<(State, f64)>,
}

impl ResidualVector {
    pub fn sup_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1.abs()).fold(0.0, f64::max)
    }

    pub fn get(&self, x: State) -> f64 {
        self.entries.iter().find(|e| e.0 == x).map_or(0.0, |e| e.1)
    }
}

/// `r(x) = Σ_y q(y,x) μ(y) + (Σ_y q(y,0) μ(y)) μ(x)`.
pub fn qsd_residual(model: &AbsorbedChainModel, mu: &Distribution) -> ResidualVector {
    let a = theta_of(model, mu);
    let mut states: BTreeSet<State> = mu.support().collect();
    for y in mu.support() {
        states.extend(model.jumps(y).iter().map(|e| e.0));
    }
    let mut inflow: std::collections::BTreeMap<State, f64> = states.iter().map(|&x| (x, 0.0)).collect();
    for (y, m) in mu.iter() {
        for &(x, r) in model.jumps(y).iter() {
            *inflow.get_mut(&x).unwrap() += r * m;
        }
        *inflow.get_mut(&y).unwrap() -= model.total_rate(y) * m;
    }
    ResidualVector {
        entries: inflow.into_iter().map(|(x, s)| (x, s + a * mu.mass(x))).collect(),
    }
}

/// `θ = Σ_x ν(x) q(x,0)`, the absorption rate under a QSD `ν`.
pub fn theta_of(model: &AbsorbedChainModel, nu: &Distribution) -> f64 {
    nu.iter().map(|(x, m)| m * model.absorb_rate(x)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    fn golden() -> Distribution {
        let a = (3.0 - 5f64.sqrt()) / 2.0;
        Distribution::from_weights([(1, a), (2, 1.0 - a)]).unwrap()
    }

    #[test]
    fn single_state_is_constant() {
        let p = evolve_conditioned(&zoo::point(), &Distribution::point(1).unwrap(), 5.0, 0.1, 1).unwrap();
        for i in 0..p.times().len() {
            assert_eq!(p.dense(i), &[1.0]);
        }
        assert_eq!(p.horizon(), 5.0);
    }

    #[test]
    fn two_state_converges_to_qsd() {
        let p = evolve_conditioned(&zoo::two_state(), &Distribution::point(2).unwrap(), 8.0, 1e-2, 2).unwrap();
        // the spectral gap is √5, so T=8 leaves ~e^{-17.9}
        assert!(p.terminal().total_variation(&golden()) < 1e-6);
    }

    #[test]
    fn renormalization_is_tiny() {
        let p = evolve_conditioned(&zoo::two_state(), &Distribution::point(2).unwrap(), 2.0, 1e-3, 2).unwrap();
        assert!(p.max_renormalization() <= 1e-8, "{}", p.max_renormalization());
    }

    #[test]
    fn semigroup() {
        let m = zoo::two_state();
        let d2 = Distribution::point(2).unwrap();
        let full = evolve_conditioned(&m, &d2, 2.0, 1e-3, 2).unwrap().terminal();
        let half = evolve_conditioned(&m, &d2, 1.0, 1e-3, 2).unwrap().terminal();
        let twice = evolve_conditioned(&m, &half, 1.0, 1e-3, 2).unwrap().terminal();
        assert!(full.total_variation(&twice) < 1e-7);
    }

    #[test]
    fn residual_examples() {
        let r = qsd_residual(&zoo::point(), &Distribution::point(1).unwrap());
        assert_eq!(r.sup_norm(), 0.0);
        let t2 = zoo::two_state();
        let r = qsd_residual(&t2, &Distribution::uniform([1, 2]).unwrap());
        assert!((r.get(1) + 0.25).abs() < 1e-15);
        assert!((r.get(2) - 0.25).abs() < 1e-15);
        assert!(r.sup_norm() > 0.1);
        assert!(qsd_residual(&t2, &golden()).sup_norm() < 1e-15);
    }

    #[test]
    fn theta_examples() {
        assert_eq!(theta_of(&zoo::point(), &Distribution::point(1).unwrap()), 1.0);
        assert_eq!(theta_of(&zoo::two_state(), &Distribution::uniform([1, 2]).unwrap()), 0.5);
        assert!((theta_of(&zoo::two_state(), &golden()) - 0.381966).abs() < 1e-6);
    }

    #[test]
    fn leak_is_detected() {
        let bd = zoo::resolve("bd:1,2").unwrap();
        let err = evolve_conditioned(&bd, &Distribution::point(4).unwrap(), 1.0, 0.01, 5).unwrap_err();
        assert!(matches!(err, FlowError::TruncationLeak { .. }));
        assert!(evolve_conditioned(&bd, &Distribution::point(4).unwrap(), 1.0, 0.01, 60).is_ok());
    }

    #[test]
    fn interpolation() {
        let p = evolve_conditioned(&zoo::two_state(), &Distribution::point(2).unwrap(), 1.0, 0.5, 2).unwrap();
        let mid = p.mass_at(0.25, 1);
        assert!((mid - 0.5 * p.dense(1)[0]).abs() < 1e-15);
        assert_eq!(p.locate_at(0.0, 0.3), 2);
        assert_eq!(p.density_at(0.0), vec![0.0, 1.0]);
    }
}
