//! Event-driven Fleming-Viot particle system.
//!
//! `N` particles move independently with the rates of the driving chain.
//! When one jumps to 0 it is revived at the position of another particle
//! chosen uniformly among the `N − 1` others. Particles are grouped into
//! per-state slots and a Fenwick tree over `count(x) · r(x)` selects the
//! next mover in `O(log)` time, which matters when rates grow with the
//! state (Galton-Watson).

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::distribution::{Distribution, DistributionError};
use crate::model::{AbsorbedChainModel, State, Target, ABSORBING};
use crate::replicas::{mean_se, run_replicas};
use crate::rng::RngStream;
use crate::simulate::DEFAULT_EVENT_CAP;
use crate::tree::Fenwick;

/// The float tree is rebuilt from exact slot weights this often.
const REBUILD_EVERY: u64 = 4096;
/// Debug builds compare the aggregate rate with a fresh sum this often.
const CHECK_EVERY: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FvError {
    #[error("Fleming-Viot needs at least two particles (got {0})")]
    TooFewParticles(usize),
    #[error("particle placed at the absorbing state")]
    AbsorbingPosition,
    #[error("every particle sits at a state with total rate 0")]
    DeadConfig,
    #[error("more than {cap} events before t = {time}")]
    EventCapExceeded { cap: u64, time: f64 },
    #[error("horizon and burn-in must satisfy 0 <= B < T")]
    BadWindow,
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

#[derive(Clone, Debug)]
struct Slot {
    state: State,
    members: Vec<usize>,
    rate: f64,
    /// Time-integrated count since the accumulator was armed.
    occupation: f64,
    touched: f64,
}

/// Positions `ξ ∈ Λ^N` with an occupancy index.
#[derive(Clone, Debug)]
pub struct ParticleConfig {
    positions: Vec<State>,
    slot_of: Vec<usize>,
    index_in_slot: Vec<usize>,
    slots: Vec<Slot>,
    lookup: HashMap<State, usize>,
    tree: Fenwick<f64>,
    updates: u64,
}

impl ParticleConfig {
    pub fn from_positions(model: &AbsorbedChainModel, positions: Vec<State>) -> Result<Self, FvError> {
        if positions.len() < 2 {
            return Err(FvError::TooFewParticles(positions.len()));
        }
        if positions.contains(&ABSORBING) {
            return Err(FvError::AbsorbingPosition);
        }
        let n = positions.len();
        let mut cfg = Self {
            positions: Vec::with_capacity(n),
            slot_of: Vec::with_capacity(n),
            index_in_slot: Vec::with_capacity(n),
            slots: Vec::new(),
            lookup: HashMap::new(),
            tree: Fenwick::new(16),
            updates: 0,
        };
        for (i, x) in positions.into_iter().enumerate() {
            let s = cfg.slot_for(model, x);
            cfg.positions.push(x);
            cfg.slot_of.push(s);
            cfg.index_in_slot.push(cfg.slots[s].members.len());
            cfg.slots[s].members.push(i);
        }
        cfg.rebuild_tree();
        Ok(cfg)
    }

    /// `n` i.i.d. draws from `mu`.
    pub fn sample(model: &AbsorbedChainModel, mu: &Distribution, n: usize, rng: &mut RngStream) -> Result<Self, FvError> {
        let sampler = mu.sampler();
        let positions = (0..n).map(|_| sampler.sample(rng)).collect();
        Self::from_positions(model, positions)
    }

    fn slot_for(&mut self, model: &AbsorbedChainModel, x: State) -> usize {
        if let Some(&s) = self.lookup.get(&x) {
            return s;
        }
        let s = self.slots.len();
        self.slots.push(Slot {
            state: x,
            members: Vec::new(),
            rate: model.total_rate(x),
            occupation: 0.0,
            touched: 0.0,
        });
        self.lookup.insert(x, s);
        if s >= self.tree.len() {
            let mut values = self.tree.values().to_vec();
            values.resize(2 * self.tree.len().max(8), 0.0);
            self.tree = Fenwick::from_values(values);
        }
        s
    }

    fn slot_weight(&self, s: usize) -> f64 {
        self.slots[s].members.len() as f64 * self.slots[s].rate
    }

    fn rebuild_tree(&mut self) {
        let mut values = vec![0.0; self.tree.len().max(self.slots.len())];
        for (s, v) in values.iter_mut().enumerate().take(self.slots.len()) {
            *v = self.slot_weight(s);
        }
        self.tree = Fenwick::from_values(values);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[State] {
        &self.positions
    }

    pub fn count(&self, x: State) -> usize {
        self.lookup.get(&x).map_or(0, |&s| self.slots[s].members.len())
    }

    /// `(state, count)` for occupied states, sorted by state.
    pub fn occupancy(&self) -> Vec<(State, u64)> {
        let mut occ: Vec<(State, u64)> = self
            .slots
            .iter()
            .filter(|s| !s.members.is_empty())
            .map(|s| (s.state, s.members.len() as u64))
            .collect();
        occ.sort_unstable();
        occ
    }

    /// `m(·, ξ)`: occupancy divided by `N`.
    pub fn empirical(&self) -> Distribution {
        Distribution::from_counts(self.occupancy()).expect("N >= 2 particles")
    }

    /// `Σ_i r(ξ(i))` as maintained by the index.
    pub fn aggregate_rate(&self) -> f64 {
        self.tree.total()
    }

    /// `Σ_i r(ξ(i))` recomputed from scratch.
    pub fn recompute_rate(&self, model: &AbsorbedChainModel) -> f64 {
        self.positions.iter().map(|&x| model.total_rate(x)).sum()
    }

    fn relocate(&mut self, model: &AbsorbedChainModel, i: usize, y: State, now: f64) {
        let from = self.slot_of[i];
        if self.slots[from].state == y {
            return;
        }
        let to = self.slot_for(model, y);
        self.touch(from, now);
        self.touch(to, now);
        // swap-remove from the old slot
        let idx = self.index_in_slot[i];
        let last = *self.slots[from].members.last().unwrap();
        self.slots[from].members.swap_remove(idx);
        if last != i {
            self.index_in_slot[last] = idx;
        }
        self.index_in_slot[i] = self.slots[to].members.len();
        self.slots[to].members.push(i);
        self.slot_of[i] = to;
        self.positions[i] = y;
        self.updates += 1;
        if self.updates % REBUILD_EVERY == 0 {
            self.rebuild_tree();
        } else {
            let (wf, wt) = (self.slot_weight(from), self.slot_weight(to));
            self.tree.set(from, wf);
            self.tree.set(to, wt);
        }
    }

    fn touch(&mut self, s: usize, now: f64) {
        let slot = &mut self.slots[s];
        slot.occupation += slot.members.len() as f64 * (now - slot.touched);
        slot.touched = now;
    }

    fn arm_occupation(&mut self, now: f64) {
        for s in &mut self.slots {
            s.occupation = 0.0;
            s.touched = now;
        }
    }

    fn occupation(&mut self, now: f64) -> Vec<(State, f64)> {
        for s in 0..self.slots.len() {
            self.touch(s, now);
        }
        let mut occ: Vec<(State, f64)> = self.slots.iter().map(|s| (s.state, s.occupation)).collect();
        occ.sort_unstable_by_key(|e| e.0);
        occ
    }
}

/// One transition of the particle system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FvEvent {
    pub dt: f64,
    pub particle: usize,
    pub from: State,
    pub to: State,
    pub revival: bool,
}

fn choose_mover(cfg: &ParticleConfig, total: f64, rng: &mut RngStream) -> usize {
    let s = cfg.tree.find(rng.uniform() * total);
    let members = &cfg.slots[s].members;
    members[rng.below(members.len() as u64) as usize]
}

/// Resolves what particle `i` does once it has been selected to move.
fn resolve_move(cfg: &mut ParticleConfig, model: &AbsorbedChainModel, i: usize, now: f64, rng: &mut RngStream) -> (State, bool) {
    let x = cfg.positions[i];
    match model.choose_target(x, rng.uniform()) {
        Target::Move(y) => {
            cfg.relocate(model, i, y, now);
            (y, false)
        }
        Target::Absorb => {
            let n = cfg.len() as u64;
            let j = loop {
                let j = rng.below(n) as usize;
                if j != i {
                    break j;
                }
            };
            let y = cfg.positions[j];
            cfg.relocate(model, i, y, now);
            (y, true)
        }
    }
}

/// Waits for the next event and applies it.
pub fn fv_step(cfg: &mut ParticleConfig, model: &AbsorbedChainModel, rng: &mut RngStream) -> Result<FvEvent, FvError> {
    let total = cfg.aggregate_rate();
    if total <= 0.0 {
        return Err(FvError::DeadConfig);
    }
    let dt = rng.exponential(total);
    let i = choose_mover(cfg, total, rng);
    let from = cfg.positions[i];
    let (to, revival) = resolve_move(cfg, model, i, 0.0, rng);
    Ok(FvEvent { dt, particle: i, from, to, revival })
}

/// A running system with a clock and event counters.
#[derive(Clone, Debug)]
pub struct FvSimulator<'m> {
    model: &'m AbsorbedChainModel,
    cfg: ParticleConfig,
    time: f64,
    next_event: Option<f64>,
    events: u64,
    revivals: u64,
    null_revivals: u64,
    event_cap: u64,
}

impl<'m> FvSimulator<'m> {
    pub fn new(model: &'m AbsorbedChainModel, cfg: ParticleConfig) -> Self {
        Self {
            model,
            cfg,
            time: 0.0,
            next_event: None,
            events: 0,
            revivals: 0,
            null_revivals: 0,
            event_cap: DEFAULT_EVENT_CAP,
        }
    }

    pub fn with_event_cap(mut self, cap: u64) -> Self {
        self.event_cap = cap;
        self
    }

    pub fn config(&self) -> &ParticleConfig {
        &self.cfg
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn revivals(&self) -> u64 {
        self.revivals
    }

    /// Revivals that landed on the state the particle left.
    pub fn null_revivals(&self) -> u64 {
        self.null_revivals
    }

    /// Runs every event up to and including time `t`. The first event after
    /// `t` is drawn and kept pending.
    pub fn advance_to(&mut self, t: f64, rng: &mut RngStream) -> Result<(), FvError> {
        loop {
            let next = match self.next_event {
                Some(s) => s,
                None => {
                    let total = self.cfg.aggregate_rate();
                    if total <= 0.0 {
                        return Err(FvError::DeadConfig);
                    }
                    let s = self.time + rng.exponential(total);
                    self.next_event = Some(s);
                    s
                }
            };
            if next > t {
                self.time = t;
                return Ok(());
            }
            self.time = next;
            self.next_event = None;
            self.events += 1;
            if self.events > self.event_cap {
                return Err(FvError::EventCapExceeded { cap: self.event_cap, time: self.time });
            }
            let total = self.cfg.aggregate_rate();
            let i = choose_mover(&self.cfg, total, rng);
            let from = self.cfg.positions[i];
            let (to, revival) = resolve_move(&mut self.cfg, self.model, i, self.time, rng);
            if revival {
                self.revivals += 1;
                if to == from {
                    self.null_revivals += 1;
                }
            }
            if cfg!(debug_assertions) && self.events % CHECK_EVERY == 0 {
                let fresh = self.cfg.recompute_rate(self.model);
                let kept = self.cfg.aggregate_rate();
                debug_assert!((fresh - kept).abs() <= 1e-9 * fresh.max(1.0), "rate index drifted: {kept} vs {fresh}");
            }
        }
    }

    /// Starts time-integrating the occupancy from the current time.
    pub fn arm_occupation(&mut self) {
        let now = self.time;
        self.cfg.arm_occupation(now);
    }

    /// Time-averaged empirical measure since [`Self::arm_occupation`].
    pub fn occupation_average(&mut self) -> Result<Distribution, FvError> {
        let now = self.time;
        let occ = self.cfg.occupation(now);
        Ok(Distribution::from_weights(occ)?)
    }
}

/// Empirical measures at the grid times.
#[derive(Clone, Debug, Serialize)]
pub struct FvTrace {
    pub times: Vec<f64>,
    pub measures: Vec<Distribution>,
    pub events: u64,
    pub revivals: u64,
    pub null_revivals: u64,
}

/// Runs the system from `init` to `horizon`, recording `m(·,ξ(t))` at each
/// grid time (sorted, within `[0, horizon]`).
pub fn fv_run(
    model: &AbsorbedChainModel,
    init: ParticleConfig,
    horizon: f64,
    grid: &[f64],
    rng: &mut RngStream,
    event_cap: u64,
) -> Result<FvTrace, FvError> {
    if !(horizon > 0.0) {
        return Err(FvError::BadWindow);
    }
    let mut sim = FvSimulator::new(model, init).with_event_cap(event_cap);
    let mut times = Vec::with_capacity(grid.len());
    let mut measures = Vec::with_capacity(grid.len());
    for &t in grid.iter().filter(|&&t| (0.0..=horizon).contains(&t)) {
        sim.advance_to(t, rng)?;
        times.push(t);
        measures.push(sim.config().empirical());
    }
    Ok(FvTrace {
        times,
        measures,
        events: sim.events,
        revivals: sim.revivals,
        null_revivals: sim.null_revivals,
    })
}

/// `0, dt, 2dt, ..., horizon` (the horizon always included).
pub fn uniform_grid(horizon: f64, dt: f64) -> Vec<f64> {
    let n = (horizon / dt).round().max(1.0) as usize;
    (0..=n).map(|i| if i == n { horizon } else { i as f64 * horizon / n as f64 }).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct StationaryEstimate {
    pub measure: Distribution,
    pub events: u64,
    pub revivals: u64,
}

/// Time average of `m(·,ξ(t))` over `(burn_in, horizon]`, started from `N`
/// i.i.d. draws of `init`.
pub fn fv_stationary(
    model: &AbsorbedChainModel,
    n: usize,
    init: &Distribution,
    burn_in: f64,
    horizon: f64,
    rng: &mut RngStream,
) -> Result<StationaryEstimate, FvError> {
    if !(0.0 <= burn_in && burn_in < horizon) {
        return Err(FvError::BadWindow);
    }
    let mut init_rng = rng.child(crate::rng::purpose::INITIAL);
    let cfg = ParticleConfig::sample(model, init, n, &mut init_rng)?;
    let mut dyn_rng = rng.child(crate::rng::purpose::DYNAMICS);
    let mut sim = FvSimulator::new(model, cfg).with_event_cap(u64::MAX);
    sim.advance_to(burn_in, &mut dyn_rng)?;
    sim.arm_occupation();
    sim.advance_to(horizon, &mut dyn_rng)?;
    Ok(StationaryEstimate {
        measure: sim.occupation_average()?,
        events: sim.events,
        revivals: sim.revivals,
    })
}

/// Default burn-in: a tenth of the horizon.
pub fn default_burn_in(horizon: f64) -> f64 {
    horizon / 10.0
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CorrelationEstimate {
    pub covariance: f64,
    pub standard_error: f64,
    /// `2 e^{2 C0 t} / N`, absent when `C0` is infinite.
    pub bound: Option<f64>,
    pub replicas: usize,
}

impl CorrelationEstimate {
    pub fn abs_covariance(&self) -> f64 {
        self.covariance.abs()
    }
}

/// Monte Carlo `Cov(m(x,ξ(t)), m(y,ξ(t)))` over replicas started from the
/// same configuration.
pub fn correlation_probe(
    model: &AbsorbedChainModel,
    init: &ParticleConfig,
    t: f64,
    x: State,
    y: State,
    replicas: usize,
    root: &RngStream,
) -> Result<CorrelationEstimate, FvError> {
    let pairs = run_replicas(root, replicas, |_, mut rng| -> Result<(f64, f64), FvError> {
        let mut sim = FvSimulator::new(model, init.clone());
        sim.advance_to(t, &mut rng)?;
        let n = sim.cfg.len() as f64;
        Ok((sim.cfg.count(x) as f64 / n, sim.cfg.count(y) as f64 / n))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let r = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / r;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / r;
    let products: Vec<f64> = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).collect();
    let (mean_prod, se) = mean_se(&products);
    // unbiased covariance
    let covariance = mean_prod * r / (r - 1.0);
    let bound = model
        .bounds()
        .absorb
        .map(|c0| 2.0 * (2.0 * c0 * t).exp() / init.len() as f64);
    Ok(CorrelationEstimate {
        covariance,
        standard_error: se * r / (r - 1.0),
        bound,
        replicas,
    })
}

/// Exact expected drift `d/dt E[m(y, ξ)]` of the `N`-particle system at a
/// configuration with empirical measure `m`:
///
/// ```text
/// Σ_x q(x,y) m(x) + N/(N−1) Σ_x q(x,0) m(x) m(y) − q(y,0) m(y)/(N−1)
/// ```
///
/// The last term comes from the revived particle never copying itself.
pub fn mean_field_drift(model: &AbsorbedChainModel, m: &Distribution, n: usize) -> Vec<(State, f64)> {
    let nf = n as f64;
    let a: f64 = m.iter().map(|(x, w)| w * model.absorb_rate(x)).sum();
    let mut drift: std::collections::BTreeMap<State, f64> = std::collections::BTreeMap::new();
    for (x, w) in m.iter() {
        *drift.entry(x).or_insert(0.0) -= model.total_rate(x) * w;
        for &(y, r) in model.jumps(x).iter() {
            *drift.entry(y).or_insert(0.0) += r * w;
        }
    }
    drift
        .into_iter()
        .map(|(y, d)| {
            let my = m.mass(y);
            (y, d + nf / (nf - 1.0) * a * my - model.absorb_rate(y) * my / (nf - 1.0))
        })
        .collect()
}
