//! Multitype branching with mean matrix `Q̃ + (α + 1) I` and the
//! Kesten-Stigum estimate of the QSD.
//!
//! Each individual lives an Exp(1) time and is replaced by independent
//! Poisson offspring counts with means `m_α(x,y)`. The expected type counts
//! evolve as `e^{t Q_α}` with `Q_α = Q̃ + α I`, so on survival the type
//! profile `X(t)/|X(t)|` converges to the left Perron vector of `Q̃`.

use rand_distr::{Binomial, Distribution as _, Poisson};
use serde::Serialize;
use thiserror::Error;

use crate::distribution::Distribution;
use crate::model::{AbsorbedChainModel, State};
use crate::oracle::{solve_qsd_power, DEFAULT_MAX_ITERS, DEFAULT_TOLERANCE};
use crate::replicas::{mean_se, run_replicas};
use crate::rng::RngStream;
use crate::tree::Fenwick;

/// Types up to this many get an oracle eigenvalue for reporting.
const ORACLE_LIMIT: usize = 5000;
/// Growth is fitted only while the population is at least this large.
const FIT_FLOOR: u64 = 50;
/// Spacing of `log |X|` samples for the growth fit.
const FIT_SPACING: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BranchError {
    #[error("branching needs finitely many types")]
    Infinite,
    #[error("alpha must be finite and nonnegative (got {0})")]
    BadAlpha(f64),
    #[error("mean offspring of type {state} at its own type is {mean} < 0; increase alpha")]
    NegativeMean { state: State, mean: f64 },
    #[error("shift alpha = {alpha} is not supercritical (lambda + alpha = {lambda_alpha})")]
    NotSupercritical { alpha: f64, lambda_alpha: f64 },
    #[error("population died out")]
    Extinct,
    #[error("start type {0} is not a type")]
    BadStart(State),
    #[error("every replica died out in every attempt")]
    AllExtinct,
    #[error("cap must be at least 2")]
    BadCap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum AlphaChoice {
    Auto,
    Fixed(f64),
}

/// `m_α(x,y) = q(x,y) + (α + 1) 1{x=y}` (with the diagonal `q(x,x) = −r(x)`).
#[derive(Clone, Debug, Serialize)]
pub struct ShiftedMeanMatrix {
    pub alpha: f64,
    /// Sparse rows: `means[x-1]` lists `(y, m_α(x,y))` with positive mean.
    pub means: Vec<Vec<(State, f64)>>,
    pub supercritical: bool,
    /// `λ + α` when an eigenvalue was computed.
    pub lambda_alpha: Option<f64>,
    #[serde(skip)]
    laws: Vec<Vec<(usize, Poisson<f64>)>>,
}

impl ShiftedMeanMatrix {
    pub fn types(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self, x: State, y: State) -> f64 {
        self.means[x - 1].iter().find(|e| e.0 == y).map_or(0.0, |e| e.1)
    }
}

/// Builds `m_α`. With [`AlphaChoice::Auto`], `α = max_x |q(x,x)|`, bumped by
/// one unless it already exceeds `C0`; since `θ ≤ C0`, the result always has
/// `λ + α > 0` and nonnegative means.
pub fn build_shifted(model: &AbsorbedChainModel, choice: AlphaChoice) -> Result<ShiftedMeanMatrix, BranchError> {
    let k = model.num_states().ok_or(BranchError::Infinite)?;
    let max_diag = (1..=k).map(|x| model.total_rate(x)).fold(0.0, f64::max);
    let c0 = (1..=k).map(|x| model.absorb_rate(x)).fold(0.0, f64::max);
    let alpha = match choice {
        AlphaChoice::Auto if max_diag > c0 => max_diag,
        AlphaChoice::Auto => max_diag + 1.0,
        AlphaChoice::Fixed(a) if a.is_finite() && a >= 0.0 => a,
        AlphaChoice::Fixed(a) => return Err(BranchError::BadAlpha(a)),
    };
    let mut means = Vec::with_capacity(k);
    let mut laws = Vec::with_capacity(k);
    for x in 1..=k {
        let diag = alpha + 1.0 - model.total_rate(x);
        if diag < -1e-12 {
            return Err(BranchError::NegativeMean { state: x, mean: diag });
        }
        let mut row: Vec<(State, f64)> = model.jumps(x).iter().copied().filter(|e| e.1 > 0.0).collect();
        if diag > 0.0 {
            row.push((x, diag));
        }
        row.sort_by_key(|e| e.0);
        laws.push(
            row.iter()
                .map(|&(y, m)| (y - 1, Poisson::new(m).expect("positive finite mean")))
                .collect(),
        );
        means.push(row);
    }
    // θ = Σ ν(x) q(x,0) ≤ C0, so α > C0 settles supercriticality directly
    let lambda_alpha = if k <= ORACLE_LIMIT {
        solve_qsd_power(model, k, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERS)
            .ok()
            .map(|s| s.lambda + alpha)
    } else {
        None
    };
    let supercritical = alpha > c0 || lambda_alpha.is_some_and(|l| l > 0.0);
    Ok(ShiftedMeanMatrix {
        alpha,
        means,
        supercritical,
        lambda_alpha,
        laws,
    })
}

/// Independent Poisson offspring counts of one type-`x` individual.
pub fn sample_offspring(sm: &ShiftedMeanMatrix, x: State, rng: &mut RngStream) -> Vec<u64> {
    let mut out = vec![0u64; sm.types()];
    for (y, law) in &sm.laws[x - 1] {
        out[*y] += law.sample(rng) as u64;
    }
    out
}

/// Multinomial resample of `target` individuals with type probabilities
/// proportional to `counts`, by sequential binomials.
pub fn downsample(counts: &[u64], target: u64, rng: &mut RngStream) -> Vec<u64> {
    let mut remaining = target;
    let mut mass: u64 = counts.iter().sum();
    let mut out = vec![0; counts.len()];
    for (o, &c) in out.iter_mut().zip(counts) {
        if remaining == 0 || mass == 0 {
            break;
        }
        let take = if c == mass {
            remaining
        } else {
            Binomial::new(remaining, c as f64 / mass as f64).unwrap().sample(rng)
        };
        *o = take;
        remaining -= take;
        mass -= c;
    }
    out
}

/// Type counts `X(t)` of a capped branching population.
#[derive(Clone, Debug)]
pub struct BranchingPopulation {
    counts: Fenwick<u64>,
    total: u64,
    cap: u64,
    time: f64,
    extinct: bool,
    cap_events: u64,
}

impl BranchingPopulation {
    /// One individual of type `x`.
    pub fn founder(types: usize, x: State, cap: u64) -> Result<Self, BranchError> {
        if x == 0 || x > types {
            return Err(BranchError::BadStart(x));
        }
        if cap < 2 {
            return Err(BranchError::BadCap);
        }
        let mut counts = Fenwick::new(types);
        counts.add(x - 1, 1);
        Ok(Self {
            counts,
            total: 1,
            cap,
            time: 0.0,
            extinct: false,
            cap_events: 0,
        })
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn is_extinct(&self) -> bool {
        self.extinct
    }

    pub fn cap_events(&self) -> u64 {
        self.cap_events
    }

    pub fn counts(&self) -> &[u64] {
        self.counts.values()
    }

    pub fn profile(&self) -> Option<Distribution> {
        Distribution::from_counts(self.counts().iter().enumerate().map(|(i, &c)| (i + 1, c))).ok()
    }
}

/// Advances to the next death-and-replacement event.
pub fn branch_step(pop: &mut BranchingPopulation, sm: &ShiftedMeanMatrix, rng: &mut RngStream) -> Result<(), BranchError> {
    step_before(pop, sm, f64::INFINITY, rng).map(|_| ())
}

/// Like [`branch_step`], but if the next event falls after `limit` the clock
/// stops at `limit` and nothing happens (exact, as the waits are memoryless).
/// Returns whether an event occurred.
pub fn step_before(
    pop: &mut BranchingPopulation,
    sm: &ShiftedMeanMatrix,
    limit: f64,
    rng: &mut RngStream,
) -> Result<bool, BranchError> {
    if pop.total == 0 {
        pop.extinct = true;
        return Err(BranchError::Extinct);
    }
    let t = pop.time + rng.exponential(pop.total as f64);
    if t > limit {
        pop.time = limit;
        return Ok(false);
    }
    pop.time = t;
    let x = pop.counts.find(rng.below(pop.total));
    pop.counts.sub(x, 1);
    pop.total -= 1;
    for (y, law) in &sm.laws[x] {
        let c = law.sample(rng) as u64;
        if c > 0 {
            pop.counts.add(*y, c);
            pop.total += c;
        }
    }
    if pop.total == 0 {
        pop.extinct = true;
        return Err(BranchError::Extinct);
    }
    if pop.total > pop.cap {
        let kept = downsample(pop.counts.values(), pop.cap / 2, rng);
        pop.total = kept.iter().sum();
        pop.counts = Fenwick::from_values(kept);
        pop.cap_events += 1;
    }
    Ok(true)
}

/// Least-squares slope of `y` against `x`.
fn slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Clone, Debug, Serialize)]
pub struct BranchReplica {
    pub replica: u64,
    pub attempts: u64,
    pub survived: bool,
    pub profile: Option<Distribution>,
    /// Fitted growth rate of `log |X|` before the first cap event.
    pub growth: Option<f64>,
    pub cap_events: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct KsEstimate {
    pub nu_hat: Distribution,
    pub alpha: f64,
    pub survival_fraction: f64,
    pub growth_rate_fit: Option<f64>,
    pub growth_rate_se: Option<f64>,
    /// `α − fitted growth`, an estimate of `θ = −λ`.
    pub theta_from_growth: Option<f64>,
    pub cap_events: u64,
    pub replicas: Vec<BranchReplica>,
}

#[derive(Clone, Copy, Debug)]
pub struct KsSettings {
    pub horizon: f64,
    pub cap: u64,
    pub replicas: usize,
    /// Extra attempts after an extinction, per replica.
    pub restarts: u64,
    pub start: State,
}

/// Runs replicas to the horizon, each restarting from one founder after an
/// extinction, and averages the surviving type profiles.
pub fn ks_estimate(sm: &ShiftedMeanMatrix, settings: KsSettings, root: &RngStream) -> Result<KsEstimate, BranchError> {
    if !sm.supercritical {
        return Err(BranchError::NotSupercritical {
            alpha: sm.alpha,
            lambda_alpha: sm.lambda_alpha.unwrap_or(f64::NAN),
        });
    }
    BranchingPopulation::founder(sm.types(), settings.start, settings.cap)?;
    let reps = run_replicas(root, settings.replicas, |r, rng| {
        let mut attempts = 0;
        for attempt in 0..=settings.restarts {
            attempts += 1;
            let mut rng = rng.child(attempt);
            let mut pop = BranchingPopulation::founder(sm.types(), settings.start, settings.cap).unwrap();
            let mut fit = Vec::new();
            let mut next_sample = 0.0;
            let mut died = false;
            while pop.time < settings.horizon {
                let (t0, n0, capped) = (pop.time, pop.total, pop.cap_events > 0);
                if step_before(&mut pop, sm, settings.horizon, &mut rng).is_err() {
                    died = true;
                    break;
                }
                // log |X| is piecewise constant; sample it on a fixed grid
                if capped || n0 < FIT_FLOOR {
                    continue;
                }
                if next_sample < t0 {
                    next_sample = (t0 / FIT_SPACING).ceil() * FIT_SPACING;
                }
                while next_sample < pop.time {
                    fit.push((next_sample, (n0 as f64).ln()));
                    next_sample += FIT_SPACING;
                }
            }
            if died {
                continue;
            }
            return BranchReplica {
                replica: r,
                attempts,
                survived: true,
                profile: pop.profile(),
                growth: slope(&fit),
                cap_events: pop.cap_events,
            };
        }
        BranchReplica {
            replica: r,
            attempts,
            survived: false,
            profile: None,
            growth: None,
            cap_events: 0,
        }
    });
    let survivors: Vec<&BranchReplica> = reps.iter().filter(|r| r.survived).collect();
    if survivors.is_empty() {
        return Err(BranchError::AllExtinct);
    }
    let mut avg = vec![0.0; sm.types()];
    for r in &survivors {
        for (x, m) in r.profile.as_ref().unwrap().iter() {
            avg[x - 1] += m / survivors.len() as f64;
        }
    }
    let growths: Vec<f64> = survivors.iter().filter_map(|r| r.growth).collect();
    let (g, g_se) = if growths.is_empty() {
        (None, None)
    } else {
        let (m, se) = mean_se(&growths);
        (Some(m), Some(se))
    };
    let attempts: u64 = reps.iter().map(|r| r.attempts).sum();
    Ok(KsEstimate {
        nu_hat: Distribution::from_dense(&avg).expect("survivors have mass"),
        alpha: sm.alpha,
        survival_fraction: survivors.len() as f64 / attempts as f64,
        growth_rate_fit: g,
        growth_rate_se: g_se,
        theta_from_growth: g.map(|g| sm.alpha - g),
        cap_events: reps.iter().map(|r| r.cap_events).sum(),
        replicas: reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn auto_alpha_rule() {
        let p = build_shifted(&zoo::point(), AlphaChoice::Auto).unwrap();
        assert_eq!(p.alpha, 2.0);
        assert_eq!(p.mean(1, 1), 2.0);
        assert!((p.lambda_alpha.unwrap() - 1.0).abs() < 1e-12);
        assert!(p.supercritical);
        let t = build_shifted(&zoo::two_state(), AlphaChoice::Auto).unwrap();
        assert_eq!(t.alpha, 2.0);
    }

    #[test]
    fn shifted_means() {
        let t = build_shifted(&zoo::two_state(), AlphaChoice::Fixed(2.0)).unwrap();
        assert_eq!((t.mean(1, 1), t.mean(1, 2), t.mean(2, 1), t.mean(2, 2)), (1.0, 1.0, 1.0, 2.0));
        assert!((t.lambda_alpha.unwrap() - (2.0 - 0.381_966_011_250_105)).abs() < 1e-9);
        assert!(matches!(
            build_shifted(&zoo::two_state(), AlphaChoice::Fixed(0.1)),
            Err(BranchError::NegativeMean { state: 1, .. })
        ));
        let p = build_shifted(&zoo::point(), AlphaChoice::Fixed(1.0)).unwrap();
        assert!(!p.supercritical);
    }

    #[test]
    fn single_type_extinction_probability() {
        let sm = build_shifted(&zoo::point(), AlphaChoice::Auto).unwrap();
        let root = RngStream::new(6);
        let n = 40_000;
        let dead = (0..n)
            .filter(|&r| {
                let mut pop = BranchingPopulation::founder(1, 1, 1000).unwrap();
                branch_step(&mut pop, &sm, &mut root.child(r)).is_err()
            })
            .count() as f64
            / n as f64;
        let p = (-2f64).exp();
        assert!((dead - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt(), "{dead}");
    }

    #[test]
    fn cap_is_respected() {
        let sm = build_shifted(&zoo::two_state(), AlphaChoice::Fixed(2.0)).unwrap();
        let mut pop = BranchingPopulation::founder(2, 1, 1000).unwrap();
        let mut rng = RngStream::new(2);
        while pop.time() < 10.0 {
            if branch_step(&mut pop, &sm, &mut rng).is_err() {
                pop = BranchingPopulation::founder(2, 1, 1000).unwrap();
                continue;
            }
            assert!(pop.total() <= 1000);
            assert_eq!(pop.total(), pop.counts().iter().sum::<u64>());
        }
        assert!(pop.cap_events() > 0);
    }

    #[test]
    fn downsample_hits_target() {
        let mut rng = RngStream::new(1);
        let out = downsample(&[10, 0, 30], 20, &mut rng);
        assert_eq!(out.iter().sum::<u64>(), 20);
        assert_eq!(out[1], 0);
    }

    #[test]
    fn single_type_estimate() {
        let sm = build_shifted(&zoo::point(), AlphaChoice::Auto).unwrap();
        let settings = KsSettings {
            horizon: 3.0,
            cap: 1000,
            replicas: 4,
            restarts: 20,
            start: 1,
        };
        let est = ks_estimate(&sm, settings, &RngStream::new(1)).unwrap();
        assert_eq!(est.nu_hat, Distribution::point(1).unwrap());
    }
}
