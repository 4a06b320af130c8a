//! Gillespie simulation of the raw absorbed chain.

use serde::Serialize;
use thiserror::Error;

use crate::distribution::Distribution;
use crate::model::{AbsorbedChainModel, State, Target};
use crate::rng::RngStream;

/// Default per-trajectory jump budget.
pub const DEFAULT_EVENT_CAP: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("more than {cap} events before time {time}; the chain may not be absorbed")]
    EventCapExceeded { cap: u64, time: f64 },
    #[error("event cap must be positive")]
    ZeroCap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AbsorptionSample {
    pub tau: f64,
    /// Last state visited in Λ before the absorbing jump.
    pub exit_state: State,
    pub jumps: u64,
}

/// Runs `Z` from a draw of `start` until the jump to 0.
pub fn simulate_until_absorption(
    model: &AbsorbedChainModel,
    start: &Distribution,
    rng: &mut RngStream,
    event_cap: u64,
) -> Result<AbsorptionSample, SimulationError> {
    if event_cap == 0 {
        return Err(SimulationError::ZeroCap);
    }
    let mut x = start.sample(rng);
    let mut t = 0.0;
    let mut jumps = 0u64;
    loop {
        let r = model.total_rate(x);
        if r <= 0.0 {
            // a trap in Λ: absorption never happens
            return Err(SimulationError::EventCapExceeded { cap: event_cap, time: f64::INFINITY });
        }
        t += rng.exponential(r);
        jumps += 1;
        if jumps > event_cap {
            return Err(SimulationError::EventCapExceeded { cap: event_cap, time: t });
        }
        match model.choose_target(x, rng.uniform()) {
            Target::Absorb => {
                return Ok(AbsorptionSample { tau: t, exit_state: x, jumps });
            }
            Target::Move(y) => x = y,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    fn mean_tau(model: &AbsorbedChainModel, start: &Distribution, n: usize, seed: u64) -> (f64, f64) {
        let root = RngStream::new(seed);
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..n {
            let mut rng = root.child(i as u64);
            let t = simulate_until_absorption(model, start, &mut rng, DEFAULT_EVENT_CAP).unwrap().tau;
            s1 += t;
            s2 += t * t;
        }
        (s1 / n as f64, s2 / n as f64)
    }

    #[test]
    fn single_state_is_exponential() {
        let m = zoo::point();
        let d = Distribution::point(1).unwrap();
        let (mean, _) = mean_tau(&m, &d, 100_000, 1);
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        let mut rng = RngStream::new(2);
        for _ in 0..100 {
            let s = simulate_until_absorption(&m, &d, &mut rng, 10).unwrap();
            assert_eq!(s.exit_state, 1);
            assert!(s.tau > 0.0);
        }
    }

    #[test]
    fn two_state_mean_from_two() {
        let (mean, _) = mean_tau(&zoo::two_state(), &Distribution::point(2).unwrap(), 100_000, 3);
        assert!((mean - 3.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn replay_is_exact() {
        let m = zoo::two_state();
        let d = Distribution::uniform([1, 2]).unwrap();
        let a = simulate_until_absorption(&m, &d, &mut RngStream::at(9, vec![4]), 100).unwrap();
        let b = simulate_until_absorption(&m, &d, &mut RngStream::at(9, vec![4]), 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cap_is_enforced() {
        let m = zoo::build_birth_death(
            crate::model::BirthDeathSpec {
                up: crate::model::RateLaw::Constant(1.0),
                down: crate::model::RateLaw::Constant(2.0),
            },
            None,
        )
        .unwrap();
        let d = Distribution::point(50).unwrap();
        let err = simulate_until_absorption(&m, &d, &mut RngStream::new(1), 5).unwrap_err();
        assert!(matches!(err, SimulationError::EventCapExceeded { cap: 5, .. }));
    }
}
