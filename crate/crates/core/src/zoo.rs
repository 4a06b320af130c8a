//! Model constructors: explicit tables, birth-death chains, the linear
//! (binary split/death) Galton-Watson chain, and uniformization to discrete
//! time.

use std::path::Path;

use serde::Serialize;

use crate::model::{
    parse_model_file, AbsorbedChainModel, BirthDeathSpec, FiniteModelBuilder, ModelError, RateLaw, State,
};

/// Uniformization rate used when none is given, as a multiple of the
/// largest total rate. Keeps a positive holding probability.
pub const DEFAULT_UNIFORMIZATION_FACTOR: f64 = 1.05;

/// `Λ = {1}`, `q(1,0) = 1`.
pub fn point() -> AbsorbedChainModel {
    build_finite(&[vec![0.0]], &[1.0]).unwrap().with_label("point")
}

/// `Λ = {1,2}`, `q(1,2) = q(2,1) = q(1,0) = 1`.
pub fn two_state() -> AbsorbedChainModel {
    build_finite(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[1.0, 0.0])
        .unwrap()
        .with_label("two-state")
}

/// `rates[i][j] = q(i+1, j+1)`, `absorb[i] = q(i+1, 0)`. Diagonal entries
/// must be zero.
pub fn build_finite(rates: &[Vec<f64>], absorb: &[f64]) -> Result<AbsorbedChainModel, ModelError> {
    let k = absorb.len();
    if k == 0 {
        return Err(ModelError::Empty);
    }
    if rates.len() != k || rates.iter().any(|r| r.len() != k) {
        return Err(ModelError::Shape {
            rows: rates.len(),
            cols: rates.first().map_or(0, Vec::len),
            absorb: k,
        });
    }
    let mut b = FiniteModelBuilder::new();
    b.states(k);
    for (i, row) in rates.iter().enumerate() {
        for (j, &r) in row.iter().enumerate() {
            if i == j {
                if r != 0.0 {
                    return Err(ModelError::SelfLoop(i + 1));
                }
                continue;
            }
            if r != 0.0 || r.is_nan() {
                b.rate(i + 1, j + 1, r)?;
            }
        }
        if absorb[i] != 0.0 || absorb[i].is_nan() {
            b.rate(i + 1, 0, absorb[i])?;
        }
    }
    b.build("finite")
}

fn check_law(law: RateLaw) -> Result<(), ModelError> {
    let c = law.coefficient();
    if !c.is_finite() {
        return Err(ModelError::NonFiniteRate { from: 1, to: 2 });
    }
    if c < 0.0 {
        return Err(ModelError::NegativeRate { from: 1, to: 2, rate: c });
    }
    Ok(())
}

/// Birth-death chain, truncated at `limit` (up-jump from `K` dropped) or
/// enumerated lazily when `limit` is `None`.
pub fn build_birth_death(spec: BirthDeathSpec, limit: Option<usize>) -> Result<AbsorbedChainModel, ModelError> {
    check_law(spec.up)?;
    check_law(spec.down)?;
    if limit == Some(0) {
        return Err(ModelError::Empty);
    }
    if limit.is_none() {
        if let (RateLaw::Constant(p), RateLaw::Constant(q)) = (spec.up, spec.down) {
            if q <= p {
                return Err(ModelError::NotSubcritical { up: p, down: q });
            }
        }
    }
    let label = match (spec.up, spec.down, limit) {
        (RateLaw::Constant(p), RateLaw::Constant(q), Some(k)) => format!("bd:{p},{q},{k}"),
        (RateLaw::Constant(p), RateLaw::Constant(q), None) => format!("bd:{p},{q}"),
        _ => "birth-death".to_string(),
    };
    Ok(AbsorbedChainModel::birth_death(spec, limit, label))
}

/// Per-individual binary split at rate `split`, death at rate `death`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GaltonWatsonSpec {
    pub split: f64,
    pub death: f64,
}

/// Population-size chain `q(n,n+1) = b n`, `q(n,n-1) = d n`; subcritical only.
pub fn build_galton_watson(spec: GaltonWatsonSpec) -> Result<AbsorbedChainModel, ModelError> {
    let GaltonWatsonSpec { split, death } = spec;
    if !(split.is_finite() && death.is_finite()) {
        return Err(ModelError::NonFiniteRate { from: 1, to: 2 });
    }
    if split <= 0.0 || death <= 0.0 {
        return Err(ModelError::NegativeRate { from: 1, to: 2, rate: split.min(death) });
    }
    if split >= death {
        return Err(ModelError::SupercriticalSpec { split, death });
    }
    let bd = BirthDeathSpec {
        up: RateLaw::Linear(split),
        down: RateLaw::Linear(death),
    };
    Ok(AbsorbedChainModel::birth_death(bd, None, format!("gw:{split},{death}")))
}

/// Substochastic matrix `P̃` on `{1..K}` with kill probabilities `P̂(x,0)`.
#[derive(Clone, Debug)]
pub struct DiscreteChainModel {
    rows: Vec<Vec<(State, f64)>>,
    kill: Vec<f64>,
    rate: Option<f64>,
}

impl DiscreteChainModel {
    /// Rows of `P̃` (sparse, sorted by target) and the kill column. Every row
    /// plus its kill mass must sum to one.
    pub fn new(rows: Vec<Vec<(State, f64)>>, kill: Vec<f64>) -> Result<Self, ModelError> {
        let k = kill.len();
        if k == 0 {
            return Err(ModelError::Empty);
        }
        if rows.len() != k {
            return Err(ModelError::Shape { rows: rows.len(), cols: k, absorb: k });
        }
        let mut sorted = Vec::with_capacity(k);
        for (i, (mut row, &kl)) in rows.into_iter().zip(&kill).enumerate() {
            row.sort_by_key(|e| e.0);
            let mut total = kl;
            for &(y, p) in &row {
                if y == 0 || y > k {
                    return Err(ModelError::UnknownState(y));
                }
                if p < 0.0 || !p.is_finite() {
                    return Err(ModelError::NegativeRate { from: i + 1, to: y, rate: p });
                }
                total += p;
            }
            if kl < 0.0 || (total - 1.0).abs() > 1e-12 {
                return Err(ModelError::RowSum { row: i + 1, total });
            }
            sorted.push(row);
        }
        Ok(Self { rows: sorted, kill, rate: None })
    }

    pub fn size(&self) -> usize {
        self.kill.len()
    }

    pub fn row(&self, x: State) -> &[(State, f64)] {
        &self.rows[x - 1]
    }

    pub fn kill(&self, x: State) -> f64 {
        self.kill[x - 1]
    }

    pub fn uniformization_rate(&self) -> Option<f64> {
        self.rate
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let k = self.size();
        let mut m = vec![vec![0.0; k]; k];
        for (i, row) in self.rows.iter().enumerate() {
            for &(y, p) in row {
                m[i][y - 1] += p;
            }
        }
        m
    }

    /// Sparse predecessor lists, used for reachability checks.
    pub(crate) fn reachability(&self) -> Result<(), State> {
        let k = self.size();
        let mut fwd = vec![false; k + 1];
        let mut bwd = vec![false; k + 1];
        let mut reverse = vec![Vec::new(); k + 1];
        for (i, row) in self.rows.iter().enumerate() {
            for &(y, p) in row {
                if p > 0.0 {
                    reverse[y].push(i + 1);
                }
            }
        }
        let mut stack = vec![1];
        fwd[1] = true;
        while let Some(x) = stack.pop() {
            for &(y, p) in self.row(x) {
                if p > 0.0 && !fwd[y] {
                    fwd[y] = true;
                    stack.push(y);
                }
            }
        }
        stack.push(1);
        bwd[1] = true;
        while let Some(x) = stack.pop() {
            for &y in &reverse[x] {
                if !bwd[y] {
                    bwd[y] = true;
                    stack.push(y);
                }
            }
        }
        match (1..=k).find(|&x| !fwd[x] || !bwd[x]) {
            Some(x) => Err(x),
            None => Ok(()),
        }
    }

    /// Period of the (irreducible) transition graph, via BFS levels.
    pub(crate) fn period(&self) -> usize {
        let k = self.size();
        let mut level = vec![usize::MAX; k + 1];
        level[1] = 0;
        let mut queue = std::collections::VecDeque::from([1]);
        let mut g = 0usize;
        while let Some(x) = queue.pop_front() {
            for &(y, p) in self.row(x) {
                if p <= 0.0 {
                    continue;
                }
                if level[y] == usize::MAX {
                    level[y] = level[x] + 1;
                    queue.push_back(y);
                } else {
                    let diff = (level[x] + 1).abs_diff(level[y]);
                    g = gcd(g, diff);
                }
            }
        }
        g.max(1)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `P̃ = I + Q̃/Λu`, kill `q(x,0)/Λu`. With `rate = None`, `Λu` is
/// [`DEFAULT_UNIFORMIZATION_FACTOR`] times the largest total rate.
pub fn uniformize(model: &AbsorbedChainModel, rate: Option<f64>) -> Result<DiscreteChainModel, ModelError> {
    let k = model.num_states().ok_or(ModelError::Infinite)?;
    let max = model.max_total_rate().unwrap_or(0.0);
    let lu = match rate {
        Some(l) => {
            if l < max || l <= 0.0 {
                return Err(ModelError::RateTooSmall { rate: l, needed: max });
            }
            l
        }
        None if max > 0.0 => DEFAULT_UNIFORMIZATION_FACTOR * max,
        None => 1.0,
    };
    let mut rows = Vec::with_capacity(k);
    let mut kill = Vec::with_capacity(k);
    for x in 1..=k {
        let mut row: Vec<(State, f64)> = model.jumps(x).iter().map(|&(y, r)| (y, r / lu)).collect();
        let hold = 1.0 - model.total_rate(x) / lu;
        if hold > 0.0 {
            row.push((x, hold));
        }
        row.sort_by_key(|e| e.0);
        rows.push(row);
        kill.push(model.absorb_rate(x) / lu);
    }
    let mut d = DiscreteChainModel::new(rows, kill)?;
    d.rate = Some(lu);
    Ok(d)
}

/// Resolves `point`, `two-state`, `bd:p,q[,K]`, `gw:b,d`, `file:<path>`.
pub fn resolve(name: &str) -> Result<AbsorbedChainModel, ModelError> {
    let bad = |reason: &str| ModelError::Parse {
        line: 0,
        reason: format!("model `{name}`: {reason}"),
    };
    let nums = |args: &str| -> Result<Vec<f64>, ModelError> {
        args.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad("expected numbers")))
            .collect()
    };
    match name.split_once(':') {
        None if name == "point" => Ok(point()),
        None if name == "two-state" => Ok(two_state()),
        Some(("bd", args)) => {
            let v = nums(args)?;
            let limit = match v.len() {
                2 => None,
                3 if v[2] >= 1.0 && v[2].fract() == 0.0 => Some(v[2] as usize),
                _ => return Err(bad("expected bd:p,q or bd:p,q,K")),
            };
            build_birth_death(
                BirthDeathSpec {
                    up: RateLaw::Constant(v[0]),
                    down: RateLaw::Constant(v[1]),
                },
                limit,
            )
        }
        Some(("gw", args)) => {
            let v = nums(args)?;
            if v.len() != 2 {
                return Err(bad("expected gw:b,d"));
            }
            build_galton_watson(GaltonWatsonSpec { split: v[0], death: v[1] })
        }
        Some(("file", path)) => {
            let text = std::fs::read_to_string(Path::new(path)).map_err(|e| bad(&e.to_string()))?;
            Ok(parse_model_file(&text)?.with_label(name))
        }
        _ => Err(bad("unknown model")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_bounds() {
        let t1 = point();
        assert_eq!(t1.bounds().absorb, Some(1.0));
        assert_eq!(t1.bounds().jump, Some(0.0));
        let t2 = two_state();
        let b = t2.bounds();
        assert_eq!((b.absorb, b.jump, b.column), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn explicit_diagonal_rejected() {
        let e = build_finite(&[vec![-2.0, 1.0], vec![1.0, 0.0]], &[1.0, 0.0]).unwrap_err();
        assert_eq!(e, ModelError::SelfLoop(1));
        assert!(matches!(
            build_finite(&[vec![0.0, -1.0], vec![1.0, 0.0]], &[1.0, 0.0]),
            Err(ModelError::NegativeRate { .. })
        ));
    }

    #[test]
    fn birth_death_truncated() {
        let spec = BirthDeathSpec { up: RateLaw::Constant(1.0), down: RateLaw::Constant(2.0) };
        let m = build_birth_death(spec, Some(3)).unwrap();
        let mut all = Vec::new();
        for x in 1..=3 {
            for &(y, r) in m.jumps(x).iter() {
                all.push((x, y, r));
            }
            if m.absorb_rate(x) > 0.0 {
                all.push((x, 0, m.absorb_rate(x)));
            }
        }
        all.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        assert_eq!(all, vec![(1, 0, 2.0), (1, 2, 1.0), (2, 1, 2.0), (2, 3, 1.0), (3, 2, 2.0)]);
    }

    #[test]
    fn truncations_are_consistent() {
        let spec = BirthDeathSpec { up: RateLaw::Constant(1.0), down: RateLaw::Constant(2.0) };
        let small = build_birth_death(spec, Some(10)).unwrap();
        let big = build_birth_death(spec, Some(40)).unwrap();
        for x in 1..10 {
            assert_eq!(&*small.jumps(x), &*big.jumps(x));
            assert_eq!(small.absorb_rate(x), big.absorb_rate(x));
        }
    }

    #[test]
    fn drifted_walk_must_drift_down() {
        let spec = BirthDeathSpec { up: RateLaw::Constant(2.0), down: RateLaw::Constant(1.0) };
        assert!(matches!(build_birth_death(spec, None), Err(ModelError::NotSubcritical { .. })));
        assert!(build_birth_death(spec, Some(5)).is_ok());
    }

    #[test]
    fn galton_watson_rates() {
        let gw = build_galton_watson(GaltonWatsonSpec { split: 1.0, death: 2.0 }).unwrap();
        assert_eq!(gw.absorb_rate(1), 2.0);
        assert_eq!(&*gw.jumps(1), &[(2, 1.0)]);
        assert_eq!(&*gw.jumps(5), &[(4, 10.0), (6, 5.0)]);
        assert_eq!(gw.bounds().absorb, Some(2.0));
        assert_eq!(gw.bounds().jump, None);
        for n in 1..50 {
            let up = |x: usize| gw.jumps(x).iter().find(|e| e.0 == x + 1).unwrap().1;
            assert_eq!(up(2 * n), 2.0 * up(n));
        }
        assert!(matches!(
            build_galton_watson(GaltonWatsonSpec { split: 2.0, death: 1.0 }),
            Err(ModelError::SupercriticalSpec { .. })
        ));
    }

    #[test]
    fn uniformize_examples() {
        let d = uniformize(&two_state(), Some(2.0)).unwrap();
        assert_eq!(d.to_dense(), vec![vec![0.0, 0.5], vec![0.5, 0.5]]);
        assert_eq!((d.kill(1), d.kill(2)), (0.5, 0.0));
        let d1 = uniformize(&point(), Some(1.0)).unwrap();
        assert_eq!(d1.to_dense(), vec![vec![0.0]]);
        assert_eq!(d1.kill(1), 1.0);
        assert!(matches!(uniformize(&two_state(), Some(1.0)), Err(ModelError::RateTooSmall { .. })));
        let auto = uniformize(&two_state(), None).unwrap();
        assert!((auto.uniformization_rate().unwrap() - 2.1).abs() < 1e-15);
    }

    #[test]
    fn discrete_validation_and_period() {
        assert!(DiscreteChainModel::new(vec![vec![(1, 0.5)]], vec![0.4]).is_err());
        let cycle = DiscreteChainModel::new(vec![vec![(2, 0.5)], vec![(1, 0.5)]], vec![0.5, 0.5]).unwrap();
        assert_eq!(cycle.period(), 2);
        let d = uniformize(&two_state(), Some(2.0)).unwrap();
        assert_eq!(d.period(), 1);
    }

    #[test]
    fn resolve_names() {
        assert_eq!(resolve("point").unwrap().num_states(), Some(1));
        assert_eq!(resolve("bd:1,2,7").unwrap().num_states(), Some(7));
        assert_eq!(resolve("bd:1,2").unwrap().num_states(), None);
        assert_eq!(resolve("gw:1,2").unwrap().absorb_rate(1), 2.0);
        assert!(resolve("gw:2,1").is_err());
        assert!(resolve("nope").is_err());
        assert!(resolve("file:/definitely/missing").is_err());
    }
}
