//! History-renewal chain for the discrete-time QSD.
//!
//! A single walker moves with `P̂`; whenever it would be killed it jumps
//! instead to a state drawn from its own past, the counting measure `μ_n`
//! of visited states. The normalized history converges to the QSD of `P̃`.

use serde::Serialize;
use thiserror::Error;

use crate::distribution::Distribution;
use crate::model::State;
use crate::rng::RngStream;
use crate::tree::Fenwick;
use crate::zoo::DiscreteChainModel;

/// Total history mass is kept below this.
pub const MASS_LIMIT: u64 = 1 << 62;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AfpError {
    #[error("start state {0} outside 1..={1}")]
    BadStart(State, usize),
    #[error("history mass would exceed 2^62")]
    Overflow,
    #[error("number of steps must be positive")]
    NoSteps,
}

/// Walker `V_n` and counting measure `μ_n` (stored densely over `{1..K}`).
#[derive(Clone, Debug)]
pub struct HistoryState {
    walker: State,
    counts: Fenwick<u64>,
    total: u64,
    steps: u64,
}

impl HistoryState {
    /// `V_0 = start`, `μ_0 = δ_start`.
    pub fn new(d: &DiscreteChainModel, start: State) -> Result<Self, AfpError> {
        let k = d.size();
        if start == 0 || start > k {
            return Err(AfpError::BadStart(start, k));
        }
        let mut counts = Fenwick::new(k);
        counts.add(start - 1, 1);
        Ok(Self {
            walker: start,
            counts,
            total: 1,
            steps: 0,
        })
    }

    pub fn walker(&self) -> State {
        self.walker
    }

    pub fn count(&self, x: State) -> u64 {
        self.counts.get(x - 1)
    }

    /// `|μ_n| = |μ_0| + n`.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `μ_n / |μ_n|`.
    pub fn estimate(&self) -> Distribution {
        Distribution::from_counts(
            self.counts
                .values()
                .iter()
                .enumerate()
                .map(|(i, &c)| (i + 1, c)),
        )
        .expect("history is never empty")
    }
}

/// Draws `y` with probability `P̂(x,y) + P̂(x,0) μ(y)/|μ|` and appends it to
/// the history.
pub fn afp_step(h: &mut HistoryState, d: &DiscreteChainModel, rng: &mut RngStream) -> Result<State, AfpError> {
    if h.total >= MASS_LIMIT {
        return Err(AfpError::Overflow);
    }
    let x = h.walker;
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut next = None;
    for &(y, p) in d.row(x) {
        acc += p;
        if u < acc {
            next = Some(y);
            break;
        }
    }
    let y = match next {
        Some(y) => y,
        None => h.counts.find(rng.below(h.total)) + 1,
    };
    h.walker = y;
    h.counts.add(y - 1, 1);
    h.total += 1;
    h.steps += 1;
    Ok(y)
}

#[derive(Clone, Debug, Serialize)]
pub struct AfpCheckpoint {
    pub step: u64,
    pub estimate: Distribution,
    pub tv_to_reference: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AfpRun {
    pub estimate: Distribution,
    pub checkpoints: Vec<AfpCheckpoint>,
}

/// Checkpoint steps `n/2^{k-1}, ..., n/2, n` (deduplicated, all ≥ 1).
pub fn checkpoint_steps(steps: u64, count: usize) -> Vec<u64> {
    let mut out: Vec<u64> = (0..count as u32)
        .rev()
        .map(|j| (steps >> j).max(1))
        .collect();
    out.dedup();
    out
}

/// `steps` AFP steps from `μ_0 = δ_start`, recording the normalized history
/// at `count` geometrically spaced checkpoints.
pub fn afp_run(
    d: &DiscreteChainModel,
    start: State,
    steps: u64,
    count: usize,
    reference: Option<&Distribution>,
    rng: &mut RngStream,
) -> Result<AfpRun, AfpError> {
    if steps == 0 {
        return Err(AfpError::NoSteps);
    }
    let mut h = HistoryState::new(d, start)?;
    let mut checkpoints = Vec::new();
    for target in checkpoint_steps(steps, count.max(1)) {
        while h.steps < target {
            afp_step(&mut h, d, rng)?;
        }
        let estimate = h.estimate();
        checkpoints.push(AfpCheckpoint {
            step: target,
            tv_to_reference: reference.map(|r| r.total_variation(&estimate)),
            estimate,
        });
    }
    Ok(AfpRun {
        estimate: h.estimate(),
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn single_state_history() {
        let d = zoo::uniformize(&zoo::point(), Some(1.0)).unwrap();
        let run = afp_run(&d, 1, 1000, 3, None, &mut RngStream::new(1)).unwrap();
        assert_eq!(run.estimate, Distribution::point(1).unwrap());
        assert_eq!(run.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![250, 500, 1000]);
    }

    #[test]
    fn step_law_from_state_one() {
        // uniformize(T2, 2): row of 1 is (0, 0.5), kill 0.5 returns to δ_1
        let d = zoo::uniformize(&zoo::two_state(), Some(2.0)).unwrap();
        let root = RngStream::new(2);
        let n = 40_000;
        let ones = (0..n)
            .filter(|&r| {
                let mut h = HistoryState::new(&d, 1).unwrap();
                afp_step(&mut h, &d, &mut root.child(r)).unwrap() == 1
            })
            .count() as f64
            / n as f64;
        assert!((ones - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt(), "{ones}");
    }

    #[test]
    fn bookkeeping() {
        let d = zoo::uniformize(&zoo::two_state(), Some(2.0)).unwrap();
        let mut h = HistoryState::new(&d, 2).unwrap();
        let mut rng = RngStream::new(3);
        let mut prev = [0, h.count(1), h.count(2)];
        for n in 1..=1000 {
            afp_step(&mut h, &d, &mut rng).unwrap();
            assert_eq!(h.total(), 1 + n);
            let now = [0, h.count(1), h.count(2)];
            assert!(now[1] >= prev[1] && now[2] >= prev[2]);
            prev = now;
        }
        assert_eq!(HistoryState::new(&d, 3).unwrap_err(), AfpError::BadStart(3, 2));
    }

    #[test]
    fn replay() {
        let d = zoo::uniformize(&zoo::two_state(), Some(2.0)).unwrap();
        let a = afp_run(&d, 1, 5000, 2, None, &mut RngStream::new(7)).unwrap();
        let b = afp_run(&d, 1, 5000, 2, None, &mut RngStream::new(7)).unwrap();
        assert_eq!(a.estimate, b.estimate);
    }
}
