//! Sparse probability vectors on the non-absorbing states.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::model::{State, ABSORBING};
use crate::rng::RngStream;

/// Masses below this (after normalization) are dropped.
pub const MASS_FLOOR: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("distribution has no positive mass")]
    Empty,
    #[error("negative mass {mass} at state {state}")]
    NegativeMass { state: State, mass: f64 },
    #[error("non-finite mass at state {state}")]
    NonFinite { state: State },
    #[error("the absorbing state 0 cannot carry mass")]
    AbsorbingState,
}

/// A probability measure on Λ with finite support, stored sorted by state.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    entries: Vec<(State, f64)>,
}

impl Distribution {
    pub fn point(x: State) -> Result<Self, DistributionError> {
        if x == ABSORBING {
            return Err(DistributionError::AbsorbingState);
        }
        Ok(Self {
            entries: vec![(x, 1.0)],
        })
    }

    /// Normalizes arbitrary nonnegative weights. Repeated states accumulate.
    pub fn from_weights<I>(weights: I) -> Result<Self, DistributionError>
    where
        I: IntoIterator<Item = (State, f64)>,
    {
        let mut acc: BTreeMap<State, f64> = BTreeMap::new();
        for (x, w) in weights {
            if x == ABSORBING {
                return Err(DistributionError::AbsorbingState);
            }
            if !w.is_finite() {
                return Err(DistributionError::NonFinite { state: x });
            }
            if w < 0.0 {
                return Err(DistributionError::NegativeMass { state: x, mass: w });
            }
            *acc.entry(x).or_insert(0.0) += w;
        }
        let total: f64 = acc.values().sum();
        if total <= 0.0 {
            return Err(DistributionError::Empty);
        }
        let kept: Vec<(State, f64)> = acc
            .into_iter()
            .map(|(x, w)| (x, w / total))
            .filter(|&(_, m)| m >= MASS_FLOOR)
            .collect();
        let total: f64 = kept.iter().map(|e| e.1).sum();
        if kept.is_empty() {
            return Err(DistributionError::Empty);
        }
        Ok(Self {
            entries: kept.into_iter().map(|(x, m)| (x, m / total)).collect(),
        })
    }

    pub fn uniform<I: IntoIterator<Item = State>>(states: I) -> Result<Self, DistributionError> {
        Self::from_weights(states.into_iter().map(|x| (x, 1.0)))
    }

    /// `masses[i]` is the weight of state `i + 1`.
    pub fn from_dense(masses: &[f64]) -> Result<Self, DistributionError> {
        Self::from_weights(masses.iter().enumerate().map(|(i, &m)| (i + 1, m)))
    }

    /// Occupancy counts divided by their total, without flooring.
    pub fn from_counts<I>(counts: I) -> Result<Self, DistributionError>
    where
        I: IntoIterator<Item = (State, u64)>,
    {
        let mut acc: BTreeMap<State, u64> = BTreeMap::new();
        for (x, c) in counts {
            if x == ABSORBING {
                return Err(DistributionError::AbsorbingState);
            }
            if c > 0 {
                *acc.entry(x).or_insert(0) += c;
            }
        }
        let total: u64 = acc.values().sum();
        if total == 0 {
            return Err(DistributionError::Empty);
        }
        let n = total as f64;
        Ok(Self {
            entries: acc.into_iter().map(|(x, c)| (x, c as f64 / n)).collect(),
        })
    }

    pub fn mass(&self, x: State) -> f64 {
        match self.entries.binary_search_by_key(&x, |e| e.0) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (State, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn support(&self) -> impl Iterator<Item = State> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_state(&self) -> State {
        self.entries.last().map(|e| e.0).unwrap_or(ABSORBING)
    }

    /// Dense vector over states `1..=k`; mass beyond `k` is dropped.
    pub fn to_dense(&self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; k];
        for &(x, m) in &self.entries {
            if x <= k {
                v[x - 1] = m;
            }
        }
        v
    }

    pub fn total_variation(&self, other: &Distribution) -> f64 {
        tv_distance(self, other)
    }

    /// Linear-scan draw; use [`Sampler`] for repeated draws.
    pub fn sample(&self, rng: &mut RngStream) -> State {
        let mut u = rng.uniform();
        for &(x, m) in &self.entries {
            if u < m {
                return x;
            }
            u -= m;
        }
        self.max_state()
    }

    pub fn sampler(&self) -> Sampler {
        Sampler::new(self.entries.iter().copied())
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.entries.iter().map(|(x, m)| format!("{x}:{m}")).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl Serialize for Distribution {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(self.entries.len()))?;
        for (x, m) in &self.entries {
            map.serialize_entry(&x.to_string(), m)?;
        }
        map.end()
    }
}

/// Half the l1 distance over the union of supports.
pub fn tv_distance(a: &Distribution, b: &Distribution) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (ea, eb) = (&a.entries, &b.entries);
    let mut sum = 0.0;
    while i < ea.len() || j < eb.len() {
        match (ea.get(i), eb.get(j)) {
            (Some(&(x, p)), Some(&(y, q))) if x == y => {
                sum += (p - q).abs();
                i += 1;
                j += 1;
            }
            (Some(&(x, p)), Some(&(y, _))) if x < y => {
                sum += p;
                i += 1;
            }
            (Some(_), Some(&(_, q))) => {
                sum += q;
                j += 1;
            }
            (Some(&(_, p)), None) => {
                sum += p;
                i += 1;
            }
            (None, Some(&(_, q))) => {
                sum += q;
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    (0.5 * sum).min(1.0)
}

/// Cumulative table for O(log n) categorical draws.
#[derive(Clone, Debug)]
pub struct Sampler {
    states: Vec<State>,
    cumulative: Vec<f64>,
}

impl Sampler {
    pub fn new<I: IntoIterator<Item = (State, f64)>>(weights: I) -> Self {
        let mut states = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (x, w) in weights {
            if w > 0.0 {
                acc += w;
                states.push(x);
                cumulative.push(acc);
            }
        }
        Self { states, cumulative }
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// State whose cumulative interval contains `u * total`.
    pub fn locate(&self, u: f64) -> State {
        let target = u * self.total();
        let i = self.cumulative.partition_point(|&c| c <= target);
        self.states[i.min(self.states.len() - 1)]
    }

    pub fn sample(&self, rng: &mut RngStream) -> State {
        self.locate(rng.uniform())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(pairs: &[(State, f64)]) -> Distribution {
        Distribution::from_weights(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn tv_examples() {
        let p1 = Distribution::point(1).unwrap();
        let p2 = Distribution::point(2).unwrap();
        assert_eq!(tv_distance(&p1, &p1), 0.0);
        assert_eq!(tv_distance(&p1, &p2), 1.0);
        let a = d(&[(1, 0.5), (2, 0.5)]);
        let b = d(&[(1, 0.382), (2, 0.618)]);
        assert!((tv_distance(&a, &b) - 0.118).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(Distribution::point(0), Err(DistributionError::AbsorbingState));
        assert!(matches!(
            Distribution::from_weights([(1, -0.1), (2, 1.0)]),
            Err(DistributionError::NegativeMass { state: 1, .. })
        ));
        assert_eq!(Distribution::from_weights([(1, 0.0)]), Err(DistributionError::Empty));
        assert!(Distribution::from_weights([(1, f64::NAN)]).is_err());
    }

    #[test]
    fn floor_drops_noise() {
        let x = d(&[(1, 1.0), (2, 1e-17)]);
        assert_eq!(x.len(), 1);
        assert_eq!(x.mass(1), 1.0);
    }

    #[test]
    fn counts_are_exact() {
        let m = Distribution::from_counts([(3, 1), (1, 2), (3, 1)]).unwrap();
        assert_eq!(m.mass(1), 0.5);
        assert_eq!(m.mass(3), 0.5);
    }

    #[test]
    fn sampler_frequencies() {
        let dist = d(&[(1, 0.2), (4, 0.8)]);
        let s = dist.sampler();
        let mut rng = RngStream::new(3);
        let n = 50_000;
        let hits = (0..n).filter(|_| s.sample(&mut rng) == 4).count() as f64 / n as f64;
        assert!((hits - 0.8).abs() < 0.01);
    }

    fn arb_dist() -> impl Strategy<Value = Distribution> {
        proptest::collection::vec((1usize..12, 0.0f64..1.0), 1..8).prop_filter_map("positive", |v| {
            Distribution::from_weights(v).ok()
        })
    }

    proptest! {
        #[test]
        fn normalized(dist in arb_dist()) {
            let total: f64 = dist.iter().map(|e| e.1).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(dist.iter().all(|(x, m)| x > 0 && m >= 0.0));
        }

        #[test]
        fn tv_is_metric(a in arb_dist(), b in arb_dist(), c in arb_dist()) {
            let ab = tv_distance(&a, &b);
            prop_assert!((ab - tv_distance(&b, &a)).abs() < 1e-15);
            prop_assert!(ab <= tv_distance(&a, &c) + tv_distance(&c, &b) + 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(tv_distance(&a, &a), 0.0);
            if ab == 0.0 {
                prop_assert_eq!(a.support().collect::<Vec<_>>(), b.support().collect::<Vec<_>>());
            }
        }
    }
}
