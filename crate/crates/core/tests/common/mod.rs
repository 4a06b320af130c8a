#![allow(dead_code)]

use qsd_core::model::AbsorbedChainModel;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Dense `Q̃` on `{1..k}` with derived diagonal.
pub fn dense_generator(model: &AbsorbedChainModel, k: usize) -> Vec<Vec<f64>> {
    let mut q = vec![vec![0.0; k]; k];
    for x in 1..=k {
        q[x - 1][x - 1] = -model.total_rate(x);
        for &(y, r) in model.jumps(x).iter() {
            if y <= k {
                q[x - 1][y - 1] += r;
            }
        }
    }
    q
}

/// `μ e^{tQ̃}` by uniformization, summing Poisson weights until the tail is
/// below `1e-17`.
pub fn transient_law(q: &[Vec<f64>], mu: &[f64], t: f64) -> Vec<f64> {
    let k = q.len();
    let rate = (0..k).map(|i| -q[i][i]).fold(0.0, f64::max).max(1e-300);
    let mut term = mu.to_vec();
    let mut weight = (-rate * t).exp();
    let mut out: Vec<f64> = term.iter().map(|m| m * weight).collect();
    let mut cumulative = weight;
    let mut n = 0.0;
    while 1.0 - cumulative > 1e-17 && n < 10_000.0 {
        n += 1.0;
        let mut next = vec![0.0; k];
        for i in 0..k {
            for j in 0..k {
                let p = if i == j { 1.0 + q[i][j] / rate } else { q[i][j] / rate };
                next[j] += term[i] * p;
            }
        }
        term = next;
        weight *= rate * t / n;
        cumulative += weight;
        for (o, m) in out.iter_mut().zip(&term) {
            *o += m * weight;
        }
    }
    out
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// Two-sample chi-square homogeneity test on category counts. Categories
/// whose pooled count is below 10 are merged from the tails inward. Returns
/// the p-value.
pub fn two_sample_chi_square(a: &[u64], b: &[u64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        acc.0 += x as f64;
        acc.1 += y as f64;
        if acc.0 + acc.1 >= 10.0 {
            bins.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.0 + acc.1 > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => bins.push(acc),
        }
    }
    if bins.len() < 2 {
        return 1.0;
    }
    let na: f64 = bins.iter().map(|b| b.0).sum();
    let nb: f64 = bins.iter().map(|b| b.1).sum();
    let n = na + nb;
    let mut stat = 0.0;
    for &(x, y) in &bins {
        let pooled = x + y;
        let ea = pooled * na / n;
        let eb = pooled * nb / n;
        stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
    }
    let df = (bins.len() - 1) as f64;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

/// Goodness-of-fit p-value of observed counts against probabilities.
/// Categories with expected count below 5 are merged.
pub fn chi_square_fit(observed: &[u64], probs: &[f64]) -> f64 {
    let n: f64 = observed.iter().sum::<u64>() as f64;
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(probs) {
        acc.0 += o as f64;
        acc.1 += p * n;
        if acc.1 >= 5.0 {
            bins.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if let Some(last) = bins.last_mut() {
        last.0 += acc.0;
        last.1 += acc.1;
    }
    if bins.len() < 2 {
        return 1.0;
    }
    let stat: f64 = bins.iter().map(|&(o, e)| (o - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((bins.len() - 1) as f64).unwrap().cdf(stat)
}

/// Histogram of `N · m` values, `0..=N`.
pub fn histogram(values: &[usize], n: usize) -> Vec<u64> {
    let mut h = vec![0; n + 1];
    for &v in values {
        h[v] += 1;
    }
    h
}
