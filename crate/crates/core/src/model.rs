//! Absorbed Markov jump chains on Λ ∪ {0}.
//!
//! A model exposes, for every state `x ≥ 1`, the finite list of jumps
//! `(y, q(x,y))` with `y ∈ Λ, y ≠ x` and the absorption rate `q(x,0)`. The
//! diagonal `q(x,x) = -(Σ q(x,y) + q(x,0))` is never stored.
//!
//! Two representations back the same interface: explicit finite rate tables
//! on `{1..K}` and lazily enumerated birth-death chains (constant or linear
//! rates, optionally truncated).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;

use serde::Serialize;
use thiserror::Error;

pub type State = usize;

/// The cemetery state.
pub const ABSORBING: State = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("negative rate {rate} for {from} -> {to}")]
    NegativeRate { from: State, to: State, rate: f64 },
    #[error("non-finite rate for {from} -> {to}")]
    NonFiniteRate { from: State, to: State },
    #[error("self-loop supplied at state {0}; the diagonal is derived, not given")]
    SelfLoop(State),
    #[error("state {0} is outside the state space")]
    UnknownState(State),
    #[error("duplicate transition {from} -> {to}")]
    Duplicate { from: State, to: State },
    #[error("rate table must be K x K with an absorption column of length K (got {rows} rows, {cols} columns, {absorb} absorption rates)")]
    Shape { rows: usize, cols: usize, absorb: usize },
    #[error("empty state space")]
    Empty,
    #[error("split rate {split} must be below death rate {death}")]
    SupercriticalSpec { split: f64, death: f64 },
    #[error("drifted walk needs down rate > up rate for certain absorption (up {up}, down {down})")]
    NotSubcritical { up: f64, down: f64 },
    #[error("uniformization rate {rate} below the largest total rate {needed}")]
    RateTooSmall { rate: f64, needed: f64 },
    #[error("operation needs a finite state space")]
    Infinite,
    #[error("discrete row {row} has total mass {total} (need 1)")]
    RowSum { row: State, total: f64 },
    #[error("malformed model file at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Declared or computed suprema. `None` means infinite or undeclared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Bounds {
    /// `C0 = sup_x q(x,0)`.
    pub absorb: Option<f64>,
    /// `q̄ = sup_x Σ_{y≠x} q(x,y)`.
    pub jump: Option<f64>,
    /// `C` with `Σ_y q(y,x) ≤ C` for every `x ∈ Λ ∪ {0}`.
    pub column: Option<f64>,
}

/// Per-state rate law of a birth-death chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum RateLaw {
    /// `c` at every state.
    Constant(f64),
    /// `c · x` at state `x`.
    Linear(f64),
}

impl RateLaw {
    #[inline]
    pub fn at(&self, x: State) -> f64 {
        match *self {
            RateLaw::Constant(c) => c,
            RateLaw::Linear(c) => c * x as f64,
        }
    }

    pub(crate) fn coefficient(&self) -> f64 {
        match *self {
            RateLaw::Constant(c) | RateLaw::Linear(c) => c,
        }
    }
}

/// `q(x,x+1) = up(x)`, `q(x,x-1) = down(x)`; the down-jump from 1 absorbs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BirthDeathSpec {
    pub up: RateLaw,
    pub down: RateLaw,
}

#[derive(Clone, Debug)]
struct FiniteRates {
    jumps: Vec<Vec<(State, f64)>>,
    absorb: Vec<f64>,
    total: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Kind {
    Finite(FiniteRates),
    BirthDeath { spec: BirthDeathSpec, limit: Option<usize> },
}

/// Where a single jump from a state lands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Absorb,
    Move(State),
}

/// Jump list of one state, borrowed from a table or built inline.
pub struct Jumps<'a>(JumpsRepr<'a>);

enum JumpsRepr<'a> {
    Borrowed(&'a [(State, f64)]),
    Inline { buf: [(State, f64); 2], len: usize },
}

impl Deref for Jumps<'_> {
    type Target = [(State, f64)];

    fn deref(&self) -> &[(State, f64)] {
        match &self.0 {
            JumpsRepr::Borrowed(s) => s,
            JumpsRepr::Inline { buf, len } => &buf[..*len],
        }
    }
}

#[derive(Clone, Debug)]
pub struct AbsorbedChainModel {
    kind: Kind,
    bounds: Bounds,
    label: String,
}

/// A finite restriction to `{1..K}` plus the states whose jumps were cut.
#[derive(Clone, Debug)]
pub struct Truncation {
    pub model: AbsorbedChainModel,
    pub boundary: Vec<State>,
}

impl AbsorbedChainModel {
    fn finite(jumps: Vec<Vec<(State, f64)>>, absorb: Vec<f64>, label: String) -> Self {
        let total: Vec<f64> = jumps
            .iter()
            .zip(&absorb)
            .map(|(row, a)| row.iter().map(|e| e.1).sum::<f64>() + a)
            .collect();
        let k = absorb.len();
        let mut inflow = vec![0.0; k + 1];
        for (row, &a) in jumps.iter().zip(&absorb) {
            for &(y, r) in row {
                inflow[y] += r;
            }
            inflow[0] += a;
        }
        let max = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0f64, f64::max);
        let bounds = Bounds {
            absorb: Some(max(&mut absorb.iter().copied())),
            jump: Some(max(&mut jumps.iter().map(|r| r.iter().map(|e| e.1).sum::<f64>()))),
            column: Some(max(&mut inflow.iter().copied())),
        };
        Self {
            kind: Kind::Finite(FiniteRates { jumps, absorb, total }),
            bounds,
            label,
        }
    }

    pub(crate) fn birth_death(spec: BirthDeathSpec, limit: Option<usize>, label: String) -> Self {
        let mut model = Self {
            kind: Kind::BirthDeath { spec, limit },
            bounds: Bounds::default(),
            label,
        };
        model.bounds = match limit {
            Some(k) => model.restrict(k).model.bounds,
            None => {
                let constant = matches!(spec.up, RateLaw::Constant(_)) && matches!(spec.down, RateLaw::Constant(_));
                let (p, q) = (spec.up.coefficient(), spec.down.coefficient());
                Bounds {
                    absorb: Some(spec.down.at(1)),
                    jump: constant.then_some(p + q),
                    column: constant.then_some(p + q),
                }
            }
        };
        model
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    /// Overrides the absorption bound C0 with a declared value.
    pub fn declare_absorb_bound(mut self, c0: Option<f64>) -> Self {
        self.bounds.absorb = c0;
        self
    }

    pub fn declare_jump_bound(mut self, qbar: Option<f64>) -> Self {
        self.bounds.jump = qbar;
        self
    }

    pub fn declare_column_bound(mut self, c: Option<f64>) -> Self {
        self.bounds.column = c;
        self
    }

    /// Number of states for finite models.
    pub fn num_states(&self) -> Option<usize> {
        match &self.kind {
            Kind::Finite(f) => Some(f.absorb.len()),
            Kind::BirthDeath { limit, .. } => *limit,
        }
    }

    pub fn contains(&self, x: State) -> bool {
        x != ABSORBING && self.num_states().is_none_or(|k| x <= k)
    }

    /// Jumps `(y, q(x,y))` from `x`, sorted by target.
    pub fn jumps(&self, x: State) -> Jumps<'_> {
        assert!(x != ABSORBING, "the absorbing state has no dynamics");
        match &self.kind {
            Kind::Finite(f) => Jumps(JumpsRepr::Borrowed(f.jumps.get(x - 1).map_or(&[][..], |r| &r[..]))),
            Kind::BirthDeath { spec, limit } => {
                let mut buf = [(0, 0.0); 2];
                let mut len = 0;
                if limit.is_some_and(|k| x > k) {
                    return Jumps(JumpsRepr::Inline { buf, len });
                }
                let down = spec.down.at(x);
                if x > 1 && down > 0.0 {
                    buf[len] = (x - 1, down);
                    len += 1;
                }
                let up = spec.up.at(x);
                if up > 0.0 && limit.is_none_or(|k| x < k) {
                    buf[len] = (x + 1, up);
                    len += 1;
                }
                Jumps(JumpsRepr::Inline { buf, len })
            }
        }
    }

    /// `q(x,0)`.
    pub fn absorb_rate(&self, x: State) -> f64 {
        assert!(x != ABSORBING, "the absorbing state has no dynamics");
        match &self.kind {
            Kind::Finite(f) => f.absorb.get(x - 1).copied().unwrap_or(0.0),
            Kind::BirthDeath { spec, limit } => {
                if x == 1 && limit.is_none_or(|k| k >= 1) {
                    spec.down.at(1)
                } else {
                    0.0
                }
            }
        }
    }

    /// `r(x) = Σ_{y≠x} q(x,y) + q(x,0) = -q(x,x)`.
    pub fn total_rate(&self, x: State) -> f64 {
        match &self.kind {
            Kind::Finite(f) => f.total.get(x - 1).copied().unwrap_or(0.0),
            Kind::BirthDeath { .. } => self.jumps(x).iter().map(|e| e.1).sum::<f64>() + self.absorb_rate(x),
        }
    }

    /// Resolves a uniform `u ∈ [0,1)` into the next move from `x`, with
    /// absorption occupying the first `q(x,0)/r(x)` of the interval.
    pub fn choose_target(&self, x: State, u: f64) -> Target {
        let jumps = self.jumps(x);
        let absorb = self.absorb_rate(x);
        let total = jumps.iter().map(|e| e.1).sum::<f64>() + absorb;
        let mut w = u * total;
        if w < absorb {
            return Target::Absorb;
        }
        w -= absorb;
        for &(y, r) in jumps.iter() {
            if w < r {
                return Target::Move(y);
            }
            w -= r;
        }
        match jumps.last() {
            Some(&(y, _)) => Target::Move(y),
            None => Target::Absorb,
        }
    }

    /// Largest total rate over a finite model.
    pub fn max_total_rate(&self) -> Option<f64> {
        let k = self.num_states()?;
        Some((1..=k).map(|x| self.total_rate(x)).fold(0.0, f64::max))
    }

    /// Restriction to `{1..k}`: jumps leaving the range are dropped (not
    /// redirected), absorption is kept.
    pub fn restrict(&self, k: usize) -> Truncation {
        let k = self.num_states().map_or(k, |n| n.min(k));
        let mut jumps = Vec::with_capacity(k);
        let mut absorb = Vec::with_capacity(k);
        let mut boundary = Vec::new();
        for x in 1..=k {
            let all = self.jumps(x);
            let kept: Vec<(State, f64)> = all.iter().copied().filter(|&(y, _)| y <= k).collect();
            if kept.len() != all.len() {
                boundary.push(x);
            }
            jumps.push(kept);
            absorb.push(self.absorb_rate(x));
        }
        let label = format!("{}|K={k}", self.label);
        Truncation {
            model: Self::finite(jumps, absorb, label),
            boundary,
        }
    }

    /// Finite model itself, or its restriction to `{1..k}`.
    pub fn finite_view(&self, k: usize) -> Truncation {
        match self.kind {
            Kind::Finite(_) if self.num_states().unwrap() <= k => Truncation {
                model: self.clone(),
                boundary: Vec::new(),
            },
            _ => self.restrict(k),
        }
    }

    /// Sparse reverse adjacency and forward adjacency for `{1..k}`.
    pub(crate) fn is_irreducible_on(&self, k: usize) -> Result<(), State> {
        if k == 0 {
            return Ok(());
        }
        let mut reverse: Vec<Vec<State>> = vec![Vec::new(); k + 1];
        for x in 1..=k {
            for &(y, r) in self.jumps(x).iter() {
                if y <= k && r > 0.0 {
                    reverse[y].push(x);
                }
            }
        }
        let reach = |next: &dyn Fn(State, &mut Vec<State>)| -> Option<State> {
            let mut seen = vec![false; k + 1];
            let mut stack = vec![1];
            seen[1] = true;
            let mut buf = Vec::new();
            while let Some(x) = stack.pop() {
                buf.clear();
                next(x, &mut buf);
                for &y in &buf {
                    if !seen[y] {
                        seen[y] = true;
                        stack.push(y);
                    }
                }
            }
            (1..=k).find(|&x| !seen[x])
        };
        let forward = |x: State, out: &mut Vec<State>| {
            out.extend(self.jumps(x).iter().filter(|&&(y, r)| y <= k && r > 0.0).map(|e| e.0))
        };
        if let Some(x) = reach(&forward) {
            return Err(x);
        }
        let backward = |x: State, out: &mut Vec<State>| out.extend_from_slice(&reverse[x]);
        match reach(&backward) {
            Some(x) => Err(x),
            None => Ok(()),
        }
    }

    /// Renders a finite model in the `qsdmodel v1` text format.
    pub fn to_model_file(&self) -> Result<String, ModelError> {
        let k = self.num_states().ok_or(ModelError::Infinite)?;
        let mut out = String::from("qsdmodel v1\n");
        for x in 1..=k {
            for &(y, r) in self.jumps(x).iter() {
                out.push_str(&format!("{x} {y} {r}\n"));
            }
            let a = self.absorb_rate(x);
            if a > 0.0 {
                out.push_str(&format!("{x} 0 {a}\n"));
            }
        }
        Ok(out)
    }
}

/// Builder for sparse finite rate tables.
#[derive(Debug, Default)]
pub struct FiniteModelBuilder {
    rates: BTreeMap<(State, State), f64>,
    max_state: State,
}

impl FiniteModelBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `q(x,y)`; `y = 0` is the absorption rate.
    pub fn rate(&mut self, x: State, y: State, rate: f64) -> Result<&mut Self, ModelError> {
        if x == ABSORBING {
            return Err(ModelError::UnknownState(x));
        }
        if x == y {
            return Err(ModelError::SelfLoop(x));
        }
        if !rate.is_finite() {
            return Err(ModelError::NonFiniteRate { from: x, to: y });
        }
        if rate < 0.0 {
            return Err(ModelError::NegativeRate { from: x, to: y, rate });
        }
        if self.rates.insert((x, y), rate).is_some() {
            return Err(ModelError::Duplicate { from: x, to: y });
        }
        self.max_state = self.max_state.max(x).max(y);
        Ok(self)
    }

    /// Pads the state space to at least `k` states.
    pub fn states(&mut self, k: usize) -> &mut Self {
        self.max_state = self.max_state.max(k);
        self
    }

    pub fn build(&self, label: impl Into<String>) -> Result<AbsorbedChainModel, ModelError> {
        let k = self.max_state;
        if k == 0 {
            return Err(ModelError::Empty);
        }
        let mut jumps = vec![Vec::new(); k];
        let mut absorb = vec![0.0; k];
        for (&(x, y), &r) in &self.rates {
            if y == ABSORBING {
                absorb[x - 1] = r;
            } else if r > 0.0 {
                jumps[x - 1].push((y, r));
            }
        }
        Ok(AbsorbedChainModel::finite(jumps, absorb, label.into()))
    }
}

/// Parses the line-oriented `qsdmodel v1` format.
pub fn parse_model_file(text: &str) -> Result<AbsorbedChainModel, ModelError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let err = |line: usize, reason: &str| ModelError::Parse {
        line,
        reason: reason.to_string(),
    };
    let header = lines.by_ref().find(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match header {
        Some((_, "qsdmodel v1")) => {}
        Some((n, _)) => return Err(err(n, "expected header `qsdmodel v1`")),
        None => return Err(err(1, "missing header")),
    }
    let mut builder = FiniteModelBuilder::new();
    for (n, line) in lines {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(n, "expected `x y rate`"));
        }
        let x: State = fields[0].parse().map_err(|_| err(n, "bad source state"))?;
        let y: State = fields[1].parse().map_err(|_| err(n, "bad target state"))?;
        let r: f64 = fields[2].parse().map_err(|_| err(n, "bad rate"))?;
        if x == ABSORBING {
            return Err(err(n, "states are positive integers"));
        }
        builder.rate(x, y, r).map_err(|e| err(n, &e.to_string()))?;
    }
    builder.build("file")
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViolationKind {
    NegativeRate { to: State, rate: f64 },
    SelfLoop,
    JumpToAbsorbing,
    AbsorbBound { rate: f64, bound: f64 },
    JumpBound { total: f64, bound: f64 },
    ColumnBound { inflow: f64, bound: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub state: State,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let x = self.state;
        match &self.kind {
            ViolationKind::NegativeRate { to, rate } => write!(f, "negative rate {rate} at state {x} -> {to}"),
            ViolationKind::SelfLoop => write!(f, "self-loop listed at state {x}"),
            ViolationKind::JumpToAbsorbing => write!(f, "jump list of state {x} targets 0"),
            ViolationKind::AbsorbBound { rate, bound } => {
                write!(f, "C0 exceeded at state {x} (q(x,0) = {rate} > {bound})")
            }
            ViolationKind::JumpBound { total, bound } => {
                write!(f, "qbar exceeded at state {x} (jump rate {total} > {bound})")
            }
            ViolationKind::ColumnBound { inflow, bound } => {
                write!(f, "column bound exceeded at state {x} (inflow {inflow} > {bound})")
            }
        }
    }
}

/// Checks the standing assumptions on the given states. Column inflow is
/// accumulated from the given states only.
pub fn validate_model(model: &AbsorbedChainModel, states: &[State]) -> Vec<Violation> {
    let mut out = Vec::new();
    let bounds = model.bounds();
    let mut inflow: BTreeMap<State, f64> = BTreeMap::new();
    for &x in states {
        if x == ABSORBING {
            continue;
        }
        let jumps = model.jumps(x);
        let mut total = 0.0;
        for &(y, r) in jumps.iter() {
            if r < 0.0 || !r.is_finite() {
                out.push(Violation { state: x, kind: ViolationKind::NegativeRate { to: y, rate: r } });
            }
            if y == x {
                out.push(Violation { state: x, kind: ViolationKind::SelfLoop });
            }
            if y == ABSORBING {
                out.push(Violation { state: x, kind: ViolationKind::JumpToAbsorbing });
            }
            total += r;
            *inflow.entry(y).or_insert(0.0) += r;
        }
        let a = model.absorb_rate(x);
        if a < 0.0 || !a.is_finite() {
            out.push(Violation { state: x, kind: ViolationKind::NegativeRate { to: 0, rate: a } });
        }
        *inflow.entry(ABSORBING).or_insert(0.0) += a;
        if let Some(c0) = bounds.absorb {
            if a > c0 {
                out.push(Violation { state: x, kind: ViolationKind::AbsorbBound { rate: a, bound: c0 } });
            }
        }
        if let Some(qbar) = bounds.jump {
            if total > qbar * (1.0 + 1e-12) {
                out.push(Violation { state: x, kind: ViolationKind::JumpBound { total, bound: qbar } });
            }
        }
    }
    if let Some(c) = bounds.column {
        for (&y, &v) in &inflow {
            if v > c * (1.0 + 1e-12) {
                out.push(Violation { state: y, kind: ViolationKind::ColumnBound { inflow: v, bound: c } });
            }
        }
    }
    out
}
