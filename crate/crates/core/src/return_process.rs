//! The μ-return process, the map Φ and the tagged-particle limit `Y`.
//!
//! `Z^μ` follows the driving chain and, at each absorption, restarts from
//! a fresh draw of `μ`. Its invariant law is `Φ(μ)`; the QSDs are exactly
//! the fixed points of Φ. From the stationarity equations,
//! `Φ(μ) ∝ μ (−Q̃)^{-1}`, so iterating Φ is inverse power iteration on `Q̃`.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::distribution::{Distribution, DistributionError};
use crate::flow::ConditionedPath;
use crate::model::{AbsorbedChainModel, State, Target};
use crate::rng::RngStream;

/// Largest state space solved directly by [`phi_map`].
pub const PHI_DIRECT_LIMIT: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReturnError {
    #[error("operation needs a finite state space")]
    Infinite,
    #[error("state space of size {0} exceeds the direct-solve limit")]
    TooLarge(usize),
    #[error("return distribution charges state {0} outside the state space")]
    OutsideSpace(State),
    #[error("the μ-return chain is not irreducible: state {0} is not reached from every state")]
    NotIrreducible(State),
    #[error("no state absorbs, so the return chain never returns")]
    NoAbsorption,
    #[error("Φ iteration did not reach TV {tol:e} in {iterations} iterations (last step {last:e})")]
    NoConvergence { iterations: usize, tol: f64, last: f64, log: Vec<f64> },
    #[error("path covers [0, {available}] but [0, {requested}] was requested")]
    PathTooShort { requested: f64, available: f64 },
    #[error("more than {cap} events before t = {time}")]
    EventCapExceeded { cap: u64, time: f64 },
    #[error("state {0} has total rate 0; the process is stuck")]
    Stuck(State),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// `q^μ(x,y) = q(x,y) + q(x,0) μ(y)` for `x ≠ y`.
#[derive(Clone, Debug)]
pub struct ReturnRates<'a> {
    pub model: &'a AbsorbedChainModel,
    pub mu: &'a Distribution,
}

impl ReturnRates<'_> {
    pub fn rate(&self, x: State, y: State) -> f64 {
        if x == y {
            return 0.0;
        }
        let base = self.model.jumps(x).iter().find(|e| e.0 == y).map_or(0.0, |e| e.1);
        base + self.model.absorb_rate(x) * self.mu.mass(y)
    }

    /// `sup_y |(π q^μ)(y)|` with the diagonal of `q^μ` included.
    pub fn stationarity_residual(&self, pi: &Distribution) -> f64 {
        let mut out: BTreeMap<State, f64> = BTreeMap::new();
        let mut returned = 0.0;
        for (x, p) in pi.iter() {
            *out.entry(x).or_insert(0.0) -= p * self.model.total_rate(x);
            for &(y, r) in self.model.jumps(x).iter() {
                *out.entry(y).or_insert(0.0) += p * r;
            }
            returned += p * self.model.absorb_rate(x);
        }
        for (y, m) in self.mu.iter() {
            *out.entry(y).or_insert(0.0) += returned * m;
        }
        out.values().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReturnRun {
    /// Time-weighted occupation over `[0, T]`.
    pub occupation: Distribution,
    pub final_state: State,
    pub jumps: u64,
    pub returns: u64,
    /// Returns that redrew the state just left.
    pub null_returns: u64,
}

/// Simulates `Z^μ` on `[0, horizon]` from a draw of `μ`.
pub fn simulate_mu_return(
    model: &AbsorbedChainModel,
    mu: &Distribution,
    horizon: f64,
    rng: &mut RngStream,
    event_cap: u64,
) -> Result<ReturnRun, ReturnError> {
    let sampler = mu.sampler();
    let mut x = sampler.sample(rng);
    let mut t = 0.0;
    let mut occ: BTreeMap<State, f64> = BTreeMap::new();
    let (mut jumps, mut returns, mut null_returns) = (0u64, 0u64, 0u64);
    loop {
        let r = model.total_rate(x);
        let hold = rng.exponential(r);
        if t + hold >= horizon {
            *occ.entry(x).or_insert(0.0) += horizon - t;
            break;
        }
        *occ.entry(x).or_insert(0.0) += hold;
        t += hold;
        jumps += 1;
        if jumps > event_cap {
            return Err(ReturnError::EventCapExceeded { cap: event_cap, time: t });
        }
        x = match model.choose_target(x, rng.uniform()) {
            Target::Move(y) => y,
            Target::Absorb => {
                returns += 1;
                let y = sampler.sample(rng);
                if y == x {
                    null_returns += 1;
                }
                y
            }
        };
    }
    Ok(ReturnRun {
        occupation: Distribution::from_weights(occ)?,
        final_state: x,
        jumps,
        returns,
        null_returns,
    })
}

/// Band LU factorization without pivoting, adequate for the nonsingular
/// M-matrices met here.
struct BandLu {
    n: usize,
    w: usize,
    a: Vec<f64>,
}

impl BandLu {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (2 * self.w + 1) + (j + self.w - i)
    }

    fn factor(mut self) -> Self {
        let (n, w) = (self.n, self.w);
        for k in 0..n {
            let pivot = self.a[self.idx(k, k)];
            for i in k + 1..n.min(k + w + 1) {
                let ik = self.idx(i, k);
                let l = self.a[ik] / pivot;
                self.a[ik] = l;
                if l == 0.0 {
                    continue;
                }
                for j in k + 1..n.min(k + w + 1) {
                    let kj = self.idx(k, j);
                    let ij = self.idx(i, j);
                    self.a[ij] -= l * self.a[kj];
                }
            }
        }
        self
    }

    fn solve(&self, b: &mut [f64]) {
        let (n, w) = (self.n, self.w);
        for i in 0..n {
            let mut s = b[i];
            for j in i.saturating_sub(w)..i {
                s -= self.a[self.idx(i, j)] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n.min(i + w + 1) {
                s -= self.a[self.idx(i, j)] * b[j];
            }
            b[i] = s / self.a[self.idx(i, i)];
        }
    }
}

fn return_chain_reach(model: &AbsorbedChainModel, mu: &Distribution, k: usize) -> Result<(), ReturnError> {
    // every state must reach every other one in the graph of q^μ
    let mut fwd: Vec<Vec<State>> = vec![Vec::new(); k + 1];
    for x in 1..=k {
        for &(y, r) in model.jumps(x).iter() {
            if r > 0.0 {
                fwd[x].push(y);
            }
        }
        if model.absorb_rate(x) > 0.0 {
            fwd[x].extend(mu.support().filter(|&y| y != x));
        }
    }
    let mut rev: Vec<Vec<State>> = vec![Vec::new(); k + 1];
    for x in 1..=k {
        for &y in &fwd[x] {
            rev[y].push(x);
        }
    }
    for graph in [&fwd, &rev] {
        let mut seen = vec![false; k + 1];
        seen[1] = true;
        let mut stack = vec![1];
        while let Some(x) = stack.pop() {
            for &y in &graph[x] {
                if !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        if let Some(x) = (1..=k).find(|&x| !seen[x]) {
            return Err(ReturnError::NotIrreducible(x));
        }
    }
    Ok(())
}

/// Exact invariant law of `Z^μ`: `μ (−Q̃)^{-1}` normalized.
pub fn phi_map(model: &AbsorbedChainModel, mu: &Distribution) -> Result<Distribution, ReturnError> {
    let k = model.num_states().ok_or(ReturnError::Infinite)?;
    if k > PHI_DIRECT_LIMIT {
        return Err(ReturnError::TooLarge(k));
    }
    if mu.max_state() > k {
        return Err(ReturnError::OutsideSpace(mu.max_state()));
    }
    if (1..=k).all(|x| model.absorb_rate(x) == 0.0) {
        return Err(ReturnError::NoAbsorption);
    }
    return_chain_reach(model, mu, k)?;
    let w = (1..=k)
        .flat_map(|x| model.jumps(x).iter().map(move |&(y, _)| x.abs_diff(y)).collect::<Vec<_>>())
        .max()
        .unwrap_or(0);
    // B = (−Q̃)^T, so that B p = μ gives p = μ(−Q̃)^{-1}
    let mut lu = BandLu {
        n: k,
        w,
        a: vec![0.0; k * (2 * w + 1)],
    };
    for x in 1..=k {
        let d = lu.idx(x - 1, x - 1);
        lu.a[d] = model.total_rate(x);
        for &(y, r) in model.jumps(x).iter() {
            let e = lu.idx(y - 1, x - 1);
            lu.a[e] -= r;
        }
    }
    let lu = lu.factor();
    let mut p = mu.to_dense(k);
    lu.solve(&mut p);
    for v in p.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(Distribution::from_dense(&p)?)
}

/// [`phi_map`] when the space is small enough, otherwise the occupation
/// measure of `Z^μ` over `[0, horizon]`.
pub fn phi_map_or_estimate(
    model: &AbsorbedChainModel,
    mu: &Distribution,
    horizon: f64,
    rng: &mut RngStream,
) -> Result<Distribution, ReturnError> {
    match model.num_states() {
        Some(k) if k <= PHI_DIRECT_LIMIT => phi_map(model, mu),
        _ => Ok(simulate_mu_return(model, mu, horizon, rng, u64::MAX)?.occupation),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PhiRun {
    pub last: Distribution,
    /// `TV(μ_{k+1}, μ_k)` for each iteration.
    pub log: Vec<f64>,
}

/// `μ_{k+1} = Φ(μ_k)` until successive iterates are within `tol` in TV.
pub fn phi_iterate(model: &AbsorbedChainModel, mu0: &Distribution, max_iters: usize, tol: f64) -> Result<PhiRun, ReturnError> {
    let mut mu = mu0.clone();
    let mut log = Vec::new();
    for _ in 0..max_iters {
        let next = phi_map(model, &mu)?;
        let step = next.total_variation(&mu);
        log.push(step);
        mu = next;
        if step < tol {
            return Ok(PhiRun { last: mu, log });
        }
    }
    Err(ReturnError::NoConvergence {
        iterations: max_iters,
        tol,
        last: log.last().copied().unwrap_or(f64::NAN),
        log,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TaggedRun {
    /// `(time, state)` at 0 and after every jump that changed the state.
    pub jumps: Vec<(f64, State)>,
    pub final_state: State,
    /// Return events that redrew the current state.
    pub null_returns: u64,
}

/// Simulates `Y` with rates `q(x,y) + q(x,0) T_tμ(y)` on `[0, horizon]`.
/// The total rate out of `x` is `r(x)` at every `t`, so Gillespie holding
/// times are exact; a return lands according to the interpolated `T_tμ` at
/// the return time.
pub fn simulate_tagged_limit(
    model: &AbsorbedChainModel,
    path: &ConditionedPath,
    y0: State,
    horizon: f64,
    rng: &mut RngStream,
) -> Result<TaggedRun, ReturnError> {
    if horizon > path.horizon() * (1.0 + 1e-12) {
        return Err(ReturnError::PathTooShort {
            requested: horizon,
            available: path.horizon(),
        });
    }
    let mut x = y0;
    let mut t = 0.0;
    let mut jumps = vec![(0.0, x)];
    let mut null_returns = 0;
    loop {
        let r = model.total_rate(x);
        if r <= 0.0 {
            break;
        }
        t += rng.exponential(r);
        if t > horizon {
            break;
        }
        let y = match model.choose_target(x, rng.uniform()) {
            Target::Move(y) => y,
            Target::Absorb => {
                let y = path.locate_at(t, rng.uniform());
                if y == x {
                    null_returns += 1;
                }
                y
            }
        };
        if y != x {
            x = y;
            jumps.push((t, x));
        }
    }
    Ok(TaggedRun {
        jumps,
        final_state: x,
        null_returns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::evolve_conditioned;
    use crate::oracle::{solve_qsd_power, DEFAULT_MAX_ITERS, DEFAULT_TOLERANCE};
    use crate::zoo;

    fn nu_t2() -> Distribution {
        solve_qsd_power(&zoo::two_state(), 2, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERS).unwrap().nu
    }

    #[test]
    fn phi_examples() {
        let d1 = Distribution::point(1).unwrap();
        assert_eq!(phi_map(&zoo::point(), &d1).unwrap(), d1);
        let t2 = zoo::two_state();
        let half = phi_map(&t2, &d1).unwrap();
        assert!((half.mass(1) - 0.5).abs() < 1e-15);
        let nu = nu_t2();
        assert!(phi_map(&t2, &nu).unwrap().total_variation(&nu) < 1e-10);
    }

    #[test]
    fn return_rates_make_nu_invariant() {
        let t2 = zoo::two_state();
        let nu = nu_t2();
        let rates = ReturnRates { model: &t2, mu: &nu };
        assert!(rates.stationarity_residual(&nu) < 1e-10);
        assert!(rates.rate(1, 2) >= 1.0);
        let d1 = Distribution::point(1).unwrap();
        let rates = ReturnRates { model: &t2, mu: &d1 };
        assert_eq!(rates.rate(2, 1), 1.0);
        assert!(rates.stationarity_residual(&Distribution::uniform([1, 2]).unwrap()) < 1e-15);
    }

    #[test]
    fn phi_matches_dense_inverse_on_banded_chain() {
        // bd:1,2,6 against a dense Gauss-Jordan inverse of −Q̃
        let m = zoo::resolve("bd:1,2,6").unwrap();
        let k = 6;
        let mut a = vec![vec![0.0; 2 * k]; k];
        for x in 1..=k {
            a[x - 1][x - 1] = m.total_rate(x);
            for &(y, r) in m.jumps(x).iter() {
                a[x - 1][y - 1] -= r;
            }
            a[x - 1][k + x - 1] = 1.0;
        }
        for c in 0..k {
            let p = a[c][c];
            for v in a[c].iter_mut() {
                *v /= p;
            }
            for r in 0..k {
                if r != c {
                    let f = a[r][c];
                    let row = a[c].clone();
                    for (v, w) in a[r].iter_mut().zip(row) {
                        *v -= f * w;
                    }
                }
            }
        }
        let mu = Distribution::from_weights([(2, 0.3), (5, 0.7)]).unwrap();
        let dense: Vec<f64> = (0..k).map(|j| mu.iter().map(|(x, w)| w * a[x - 1][k + j]).sum()).collect();
        let expect = Distribution::from_dense(&dense).unwrap();
        assert!(phi_map(&m, &mu).unwrap().total_variation(&expect) < 1e-13);
    }

    #[test]
    fn phi_errors() {
        let bd = zoo::resolve("bd:1,2").unwrap();
        assert_eq!(
            phi_map(&bd, &Distribution::point(1).unwrap()).unwrap_err(),
            ReturnError::Infinite
        );
        // 2 → 1 only, and returns to 1: state 2 is never re-entered
        let m = zoo::build_finite(&[vec![0.0, 0.0], vec![1.0, 0.0]], &[1.0, 0.0]).unwrap();
        assert_eq!(
            phi_map(&m, &Distribution::point(1).unwrap()).unwrap_err(),
            ReturnError::NotIrreducible(2)
        );
    }

    #[test]
    fn iteration_converges_to_oracle() {
        let t2 = zoo::two_state();
        let nu = nu_t2();
        let run = phi_iterate(&t2, &Distribution::point(1).unwrap(), 60, 1e-10).unwrap();
        assert!(run.last.total_variation(&nu) < 1e-8);
        let run2 = phi_iterate(&t2, &Distribution::uniform([1, 2]).unwrap(), 60, 1e-10).unwrap();
        assert!(run2.last.total_variation(&nu) < 1e-8);
        let one = phi_iterate(&zoo::point(), &Distribution::point(1).unwrap(), 5, 1e-10).unwrap();
        assert_eq!(one.log.len(), 1);
        match phi_iterate(&t2, &Distribution::point(1).unwrap(), 2, 1e-14) {
            Err(ReturnError::NoConvergence { log, .. }) => assert_eq!(log.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn return_occupation() {
        let t2 = zoo::two_state();
        let d1 = Distribution::point(1).unwrap();
        let run = simulate_mu_return(&t2, &d1, 1e4, &mut RngStream::new(3), u64::MAX).unwrap();
        assert!((run.occupation.mass(1) - 0.5).abs() < 0.01);
        assert_eq!(run.returns, run.null_returns);
        let nu = nu_t2();
        let run = simulate_mu_return(&t2, &nu, 1e4, &mut RngStream::new(4), u64::MAX).unwrap();
        assert!(run.occupation.total_variation(&nu) < 0.01);
        let run = simulate_mu_return(&zoo::point(), &d1, 100.0, &mut RngStream::new(4), u64::MAX).unwrap();
        assert_eq!(run.occupation, d1);
    }

    #[test]
    fn tagged_limit_basics() {
        let p = zoo::point();
        let d1 = Distribution::point(1).unwrap();
        let path = evolve_conditioned(&p, &d1, 3.0, 0.1, 1).unwrap();
        let run = simulate_tagged_limit(&p, &path, 1, 3.0, &mut RngStream::new(1)).unwrap();
        assert_eq!(run.jumps, vec![(0.0, 1)]);
        assert!(run.null_returns > 0);
        assert!(matches!(
            simulate_tagged_limit(&p, &path, 1, 4.0, &mut RngStream::new(1)),
            Err(ReturnError::PathTooShort { .. })
        ));
    }
}
