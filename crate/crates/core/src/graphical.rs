//! Graphical construction of Fleming-Viot from marked Poisson processes and
//! its coupling with the tagged-particle limit `Y`.
//!
//! Each particle `i` owns an internal stream (rate `q̄`, mark `u`) and a
//! voter stream (rate `C0`, marks `(b, v)`). At an internal mark a particle
//! at `x` moves to `y` when `u` falls in `I(x,y)`, the consecutive
//! subintervals of `[0,1)` of lengths `q(x,y)/q̄` in state order; otherwise
//! it stays. At a voter mark it is revived when `b ≤ q(x,0)/C0`, landing
//! on `y` when `v ∈ J_i(t,y)`, the state-ordered partition by the
//! empirical measure of the other `N − 1` particles.
//!
//! The limit process `Y` reads the same marks as particle 1 but revives
//! into `J̃(t,y)`, the state-ordered partition by `T_tμ`. The coupling
//! indicator `ψ` switches on at the first voter mark of particle 1 whose
//! `v` lands in different states under `J_1` and `J̃`, or when the shared
//! initial uniform already places them differently.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::Serialize;
use thiserror::Error;

use crate::distribution::Distribution;
use crate::flow::ConditionedPath;
use crate::model::{AbsorbedChainModel, State, ABSORBING};
use crate::replicas::{mean_se, run_replicas};
use crate::rng::{purpose, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphicalError {
    #[error("graphical construction needs finite q̄ and C0")]
    UnboundedRates,
    #[error("need at least two particles (got {0})")]
    TooFewParticles(usize),
    #[error("particle placed at the absorbing state")]
    AbsorbingPosition,
    #[error("path covers [0, {available}] but [0, {requested}] was requested")]
    PathTooShort { requested: f64, available: f64 },
    #[error("more than {cap} marks before t = {time}")]
    EventCapExceeded { cap: u64, time: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum MarkKind {
    Internal,
    Voter,
}

/// One ring of a marked Poisson process. Internal marks use `u`; voter
/// marks use `(b, v)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Mark {
    pub time: f64,
    pub u: f64,
    pub b: f64,
    pub v: f64,
}

/// A lazily realized marked Poisson process.
#[derive(Clone, Debug)]
pub struct MarkStream {
    kind: MarkKind,
    rate: f64,
    time: f64,
    rng: RngStream,
}

impl MarkStream {
    pub fn new(kind: MarkKind, rate: f64, rng: RngStream) -> Self {
        Self { kind, rate, time: 0.0, rng }
    }

    pub fn kind(&self) -> MarkKind {
        self.kind
    }

    /// The next ring after the previous one; never rings when the rate is 0.
    pub fn next_mark(&mut self) -> Mark {
        self.time += self.rng.exponential(self.rate);
        match self.kind {
            MarkKind::Internal => Mark {
                time: self.time,
                u: self.rng.uniform(),
                b: f64::NAN,
                v: f64::NAN,
            },
            MarkKind::Voter => {
                let b = self.rng.uniform();
                let v = self.rng.uniform();
                Mark { time: self.time, u: f64::NAN, b, v }
            }
        }
    }
}

/// `y` with `u ∈ I(x,y)`, or `x` itself when `u` falls in the holding part.
fn internal_target(model: &AbsorbedChainModel, qbar: f64, x: State, u: f64) -> State {
    let w = u * qbar;
    let mut acc = 0.0;
    for &(y, r) in model.jumps(x).iter() {
        acc += r;
        if w < acc {
            return y;
        }
    }
    x
}

/// `y` with `v ∈ J_i(t,y)` for a particle at `x`, the other particles being
/// described by `occupancy` minus one particle at `x`.
fn others_target(occupancy: &BTreeMap<State, usize>, x: State, n: usize, v: f64) -> State {
    let w = v * (n - 1) as f64;
    let mut acc = 0.0;
    let mut last = x;
    for (&y, &c) in occupancy {
        let c = if y == x { c - 1 } else { c };
        if c == 0 {
            continue;
        }
        acc += c as f64;
        last = y;
        if w < acc {
            return y;
        }
    }
    last
}

type HeapKey = Reverse<(u64, usize, MarkKind)>;

/// Fleming-Viot driven by per-particle mark streams.
#[derive(Clone, Debug)]
pub struct GraphicalFv<'m> {
    model: &'m AbsorbedChainModel,
    qbar: f64,
    c0: f64,
    positions: Vec<State>,
    occupancy: BTreeMap<State, usize>,
    streams: Vec<[MarkStream; 2]>,
    pending: Vec<[Mark; 2]>,
    heap: BinaryHeap<HeapKey>,
    time: f64,
    marks: u64,
}

impl<'m> GraphicalFv<'m> {
    /// Particle `i` reads its marks from `root/[INTERNAL_MARKS, i]` and
    /// `root/[VOTER_MARKS, i]`.
    pub fn new(model: &'m AbsorbedChainModel, positions: Vec<State>, root: &RngStream) -> Result<Self, GraphicalError> {
        let b = model.bounds();
        let (qbar, c0) = match (b.jump, b.absorb) {
            (Some(q), Some(c)) if q.is_finite() && c.is_finite() => (q, c),
            _ => return Err(GraphicalError::UnboundedRates),
        };
        if positions.len() < 2 {
            return Err(GraphicalError::TooFewParticles(positions.len()));
        }
        if positions.contains(&ABSORBING) {
            return Err(GraphicalError::AbsorbingPosition);
        }
        let mut occupancy = BTreeMap::new();
        for &x in &positions {
            *occupancy.entry(x).or_insert(0) += 1;
        }
        let mut streams = Vec::with_capacity(positions.len());
        let mut pending = Vec::with_capacity(positions.len());
        let mut heap = BinaryHeap::with_capacity(2 * positions.len());
        for i in 0..positions.len() {
            let mut pair = [
                MarkStream::new(MarkKind::Internal, qbar, root.descend(&[purpose::INTERNAL_MARKS, i as u64])),
                MarkStream::new(MarkKind::Voter, c0, root.descend(&[purpose::VOTER_MARKS, i as u64])),
            ];
            let marks = [pair[0].next_mark(), pair[1].next_mark()];
            for (m, kind) in marks.iter().zip([MarkKind::Internal, MarkKind::Voter]) {
                if m.time.is_finite() {
                    heap.push(Reverse((m.time.to_bits(), i, kind)));
                }
            }
            streams.push(pair);
            pending.push(marks);
        }
        Ok(Self {
            model,
            qbar,
            c0,
            positions,
            occupancy,
            streams,
            pending,
            heap,
            time: 0.0,
            marks: 0,
        })
    }

    pub fn positions(&self) -> &[State] {
        &self.positions
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn marks(&self) -> u64 {
        self.marks
    }

    pub fn empirical(&self) -> Distribution {
        Distribution::from_counts(self.occupancy.iter().map(|(&x, &c)| (x, c as u64))).expect("N >= 2")
    }

    fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|Reverse((bits, _, _))| f64::from_bits(*bits))
    }

    /// Removes the next mark, draws its successor and returns it.
    fn pop(&mut self) -> (usize, MarkKind, Mark) {
        let Reverse((_, i, kind)) = self.heap.pop().expect("peeked");
        let slot = kind as usize;
        let mark = self.pending[i][slot];
        let next = self.streams[i][slot].next_mark();
        self.pending[i][slot] = next;
        self.heap.push(Reverse((next.time.to_bits(), i, kind)));
        self.marks += 1;
        (i, kind, mark)
    }

    /// Where particle `i` goes under the given mark, without moving it.
    fn target(&self, i: usize, kind: MarkKind, mark: &Mark) -> State {
        let x = self.positions[i];
        match kind {
            MarkKind::Internal => internal_target(self.model, self.qbar, x, mark.u),
            MarkKind::Voter => {
                if mark.b * self.c0 <= self.model.absorb_rate(x) {
                    others_target(&self.occupancy, x, self.positions.len(), mark.v)
                } else {
                    x
                }
            }
        }
    }

    fn move_to(&mut self, i: usize, y: State) {
        let x = self.positions[i];
        if x == y {
            return;
        }
        let c = self.occupancy.get_mut(&x).unwrap();
        *c -= 1;
        if *c == 0 {
            self.occupancy.remove(&x);
        }
        *self.occupancy.entry(y).or_insert(0) += 1;
        self.positions[i] = y;
    }

    /// Applies every mark up to time `t`.
    pub fn advance_to(&mut self, t: f64, cap: u64) -> Result<(), GraphicalError> {
        while let Some(s) = self.peek_time() {
            if s > t {
                break;
            }
            let (i, kind, mark) = self.pop();
            self.time = mark.time;
            if self.marks > cap {
                return Err(GraphicalError::EventCapExceeded { cap, time: self.time });
            }
            let y = self.target(i, kind, &mark);
            self.move_to(i, y);
        }
        self.time = t;
        Ok(())
    }
}

/// Final empirical measure of a graphical-construction run from fixed
/// positions.
pub fn graphical_fv(
    model: &AbsorbedChainModel,
    positions: Vec<State>,
    horizon: f64,
    rng: &RngStream,
    cap: u64,
) -> Result<Distribution, GraphicalError> {
    let mut g = GraphicalFv::new(model, positions, rng)?;
    g.advance_to(horizon, cap)?;
    Ok(g.empirical())
}

/// `∫_{t0}^{t1} Σ_x |m(x) − T_sμ(x)| ds` with `m` fixed, exact for the
/// piecewise-linear interpolation of the path.
fn discrepancy(path: &ConditionedPath, occupancy: &BTreeMap<State, usize>, n: usize, t0: f64, t1: f64) -> f64 {
    let k = path.truncation();
    let nf = n as f64;
    let mut total = 0.0;
    for &c in occupancy.range(k + 1..).map(|e| e.1) {
        total += c as f64 / nf * (t1 - t0);
    }
    let times = path.times();
    let mut a = t0;
    while a < t1 {
        let next = times.partition_point(|&s| s <= a);
        let b = times.get(next).map_or(t1, |&s| s.min(t1));
        let len = b - a;
        for x in 1..=k {
            let m = occupancy.get(&x).map_or(0.0, |&c| c as f64 / nf);
            let fa = m - path.mass_at(a, x);
            let fb = m - path.mass_at(b, x);
            total += if fa * fb >= 0.0 {
                0.5 * len * (fa + fb).abs()
            } else {
                0.5 * len * (fa * fa + fb * fb) / (fa.abs() + fb.abs())
            };
        }
        a = b;
    }
    total
}

#[derive(Clone, Debug, Serialize)]
pub struct CouplingIndicator {
    pub psi: bool,
    /// Time at which ψ switched on (0 for an initial mismatch).
    pub divergence_time: Option<f64>,
    pub initial_mismatch: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoupledRun {
    /// `m(·, ξ(t))` at the path grid times up to the horizon.
    pub fv_trace: Vec<(f64, Distribution)>,
    /// `(time, state)` of `Y` at 0 and after each change.
    pub y_path: Vec<(f64, State)>,
    /// Position of the tagged FV particle at the horizon.
    pub tagged_final: State,
    pub indicator: CouplingIndicator,
    /// `∫_0^T Σ_x |m(x, ξ(s)) − T_sμ(x)| ds` along this run.
    pub discrepancy: f64,
    pub marks: u64,
}

/// Runs FV (particle 1 tagged) and `Y(·, μ)` from the same marks. The
/// initial particles are i.i.d. `fv_init`; particle 1 and `Y(0)` share one
/// uniform, placed by the ordered partitions of `fv_init` and `T_0μ`.
pub fn coupled_tagged_run(
    model: &AbsorbedChainModel,
    path: &ConditionedPath,
    n: usize,
    fv_init: &Distribution,
    horizon: f64,
    rng: &RngStream,
    cap: u64,
) -> Result<CoupledRun, GraphicalError> {
    if horizon > path.horizon() * (1.0 + 1e-12) {
        return Err(GraphicalError::PathTooShort {
            requested: horizon,
            available: path.horizon(),
        });
    }
    if n < 2 {
        return Err(GraphicalError::TooFewParticles(n));
    }
    let mut start = rng.child(purpose::COUPLING);
    let u = start.uniform();
    let init_sampler = fv_init.sampler();
    let tagged0 = init_sampler.locate(u);
    let y0 = path.locate_at(0.0, u);
    let mut init_rng = rng.child(purpose::INITIAL);
    let mut positions = Vec::with_capacity(n);
    positions.push(tagged0);
    positions.extend((1..n).map(|_| init_sampler.sample(&mut init_rng)));
    let mut g = GraphicalFv::new(model, positions, rng)?;

    let mut indicator = CouplingIndicator {
        psi: tagged0 != y0,
        divergence_time: (tagged0 != y0).then_some(0.0),
        initial_mismatch: tagged0 != y0,
    };
    let mut y = y0;
    let mut y_path = vec![(0.0, y)];
    let grid: Vec<f64> = path.times().iter().copied().filter(|&t| t <= horizon).collect();
    let mut fv_trace = Vec::with_capacity(grid.len());
    let mut next_grid = 0;
    let mut disc = 0.0;
    let mut last = 0.0;

    loop {
        let s = g.peek_time().unwrap_or(f64::INFINITY);
        while next_grid < grid.len() && grid[next_grid] < s.min(horizon + f64::EPSILON) {
            fv_trace.push((grid[next_grid], g.empirical()));
            next_grid += 1;
        }
        if s > horizon {
            disc += discrepancy(path, &g.occupancy, n, last, horizon);
            break;
        }
        disc += discrepancy(path, &g.occupancy, n, last, s);
        last = s;
        let (i, kind, mark) = g.pop();
        g.time = s;
        if g.marks > cap {
            return Err(GraphicalError::EventCapExceeded { cap, time: s });
        }
        if i == 0 {
            let y_next = match kind {
                MarkKind::Internal => internal_target(model, g.qbar, y, mark.u),
                MarkKind::Voter => {
                    if !indicator.psi {
                        let fv_side = others_target(&g.occupancy, g.positions[0], n, mark.v);
                        if fv_side != path.locate_at(s, mark.v) {
                            indicator.psi = true;
                            indicator.divergence_time = Some(s);
                        }
                    }
                    if mark.b * g.c0 <= model.absorb_rate(y) {
                        path.locate_at(s, mark.v)
                    } else {
                        y
                    }
                }
            };
            if y_next != y {
                y = y_next;
                y_path.push((s, y));
            }
        }
        let target = g.target(i, kind, &mark);
        g.move_to(i, target);
    }
    while next_grid < grid.len() {
        fv_trace.push((grid[next_grid], g.empirical()));
        next_grid += 1;
    }
    Ok(CoupledRun {
        fv_trace,
        y_path,
        tagged_final: g.positions[0],
        indicator,
        discrepancy: disc,
        marks: g.marks,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CouplingRecord {
    pub replica: u64,
    pub psi: bool,
    pub divergence_time: Option<f64>,
    pub initial_mismatch: bool,
    pub discrepancy: f64,
    pub trajectories_agree: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CouplingSummary {
    pub particles: usize,
    pub replicas: usize,
    /// Estimated `P(ψ(T) = 1)` and its standard error.
    pub psi_rate: f64,
    pub psi_se: f64,
    pub initial_mismatch_rate: f64,
    /// `P(ψ(0)=1) + C0 ∫ E Σ|m − T_sμ| ds`, estimated from the same replicas.
    pub bound: f64,
    pub bound_se: f64,
    pub records: Vec<CouplingRecord>,
}

/// Replicated [`coupled_tagged_run`], replica `r` on `root.child(r)`.
pub fn coupling_experiment(
    model: &AbsorbedChainModel,
    path: &ConditionedPath,
    n: usize,
    fv_init: &Distribution,
    horizon: f64,
    replicas: usize,
    root: &RngStream,
    cap: u64,
) -> Result<CouplingSummary, GraphicalError> {
    let c0 = model.bounds().absorb.ok_or(GraphicalError::UnboundedRates)?;
    let runs = run_replicas(root, replicas, |r, rng| {
        coupled_tagged_run(model, path, n, fv_init, horizon, &rng, cap).map(|run| {
            let y_final = run.y_path.last().unwrap().1;
            CouplingRecord {
                replica: r,
                psi: run.indicator.psi,
                divergence_time: run.indicator.divergence_time,
                initial_mismatch: run.indicator.initial_mismatch,
                discrepancy: run.discrepancy,
                trajectories_agree: y_final == run.tagged_final,
            }
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let psi: Vec<f64> = runs.iter().map(|r| r.psi as u8 as f64).collect();
    let rhs: Vec<f64> = runs
        .iter()
        .map(|r| r.initial_mismatch as u8 as f64 + c0 * r.discrepancy)
        .collect();
    let (psi_rate, psi_se) = mean_se(&psi);
    let (bound, bound_se) = mean_se(&rhs);
    let initial_mismatch_rate = runs.iter().filter(|r| r.initial_mismatch).count() as f64 / runs.len() as f64;
    Ok(CouplingSummary {
        particles: n,
        replicas,
        psi_rate,
        psi_se,
        initial_mismatch_rate,
        bound,
        bound_se,
        records: runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::evolve_conditioned;
    use crate::zoo;

    #[test]
    fn streams_are_ordered_and_replay() {
        let mut a = MarkStream::new(MarkKind::Voter, 2.0, RngStream::new(1));
        let mut b = MarkStream::new(MarkKind::Voter, 2.0, RngStream::new(1));
        let mut prev = 0.0;
        for _ in 0..100 {
            let m = a.next_mark();
            assert!(m.time > prev);
            prev = m.time;
            assert!((0.0..1.0).contains(&m.b) && (0.0..1.0).contains(&m.v));
            let n = b.next_mark();
            assert_eq!((m.time, m.b, m.v), (n.time, n.b, n.v));
        }
        let mut idle = MarkStream::new(MarkKind::Internal, 0.0, RngStream::new(1));
        assert!(idle.next_mark().time.is_infinite());
    }

    #[test]
    fn interval_partitions() {
        let t2 = zoo::two_state();
        assert_eq!(internal_target(&t2, 1.0, 1, 0.3), 2);
        let bd = zoo::resolve("bd:1,2,5").unwrap();
        // from 3: I(3,2) = [0, 2/3), I(3,4) = [2/3, 1)
        assert_eq!(internal_target(&bd, 3.0, 3, 0.5), 2);
        assert_eq!(internal_target(&bd, 3.0, 3, 0.9), 4);
        // from 1 only the up-jump exists: I(1,2) = [0, 1/3), rest holds
        assert_eq!(internal_target(&bd, 3.0, 1, 0.5), 1);
        let occ = BTreeMap::from([(1, 2), (2, 1)]);
        // particle at 1: others are one at 1 and one at 2
        assert_eq!(others_target(&occ, 1, 3, 0.4), 1);
        assert_eq!(others_target(&occ, 1, 3, 0.6), 2);
    }

    #[test]
    fn refuses_unbounded_rates() {
        let gw = zoo::resolve("gw:1,2").unwrap();
        assert_eq!(
            GraphicalFv::new(&gw, vec![1, 1], &RngStream::new(0)).unwrap_err(),
            GraphicalError::UnboundedRates
        );
    }

    #[test]
    fn single_state_never_decouples() {
        let p = zoo::point();
        let d1 = Distribution::point(1).unwrap();
        let path = evolve_conditioned(&p, &d1, 2.0, 0.1, 1).unwrap();
        for r in 0..20 {
            let run = coupled_tagged_run(&p, &path, 5, &d1, 2.0, &RngStream::at(1, vec![r]), u64::MAX).unwrap();
            assert!(!run.indicator.psi);
            assert_eq!(run.discrepancy, 0.0);
            assert_eq!(run.tagged_final, 1);
        }
    }

    #[test]
    fn psi_is_monotone_and_implies_agreement() {
        let t2 = zoo::two_state();
        let d2 = Distribution::point(2).unwrap();
        let path = evolve_conditioned(&t2, &d2, 2.0, 0.01, 2).unwrap();
        let s = coupling_experiment(&t2, &path, 10, &d2, 2.0, 200, &RngStream::new(3), u64::MAX).unwrap();
        for r in &s.records {
            if !r.psi {
                assert!(r.trajectories_agree);
            }
            assert!(!r.initial_mismatch);
        }
        assert!(s.psi_rate > 0.0 && s.psi_rate < 1.0);
        // same replica, shorter horizons: ψ switched on no later
        let long = coupled_tagged_run(&t2, &path, 10, &d2, 2.0, &RngStream::new(9), u64::MAX).unwrap();
        let short = coupled_tagged_run(&t2, &path, 10, &d2, 1.0, &RngStream::new(9), u64::MAX).unwrap();
        if short.indicator.psi {
            assert!(long.indicator.psi);
            assert_eq!(long.indicator.divergence_time, short.indicator.divergence_time);
        }
    }
}
