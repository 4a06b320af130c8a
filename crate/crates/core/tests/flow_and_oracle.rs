mod common;

use common::{dense_generator, normalized, transient_law};
use proptest::prelude::*;
use qsd_core::distribution::Distribution;
use qsd_core::flow::{evolve_conditioned, qsd_residual, theta_of};
use qsd_core::model::AbsorbedChainModel;
use qsd_core::oracle::{minimal_qsd_reference, solve_qsd_discrete, solve_qsd_power, DEFAULT_MAX_ITERS};
use qsd_core::zoo;

fn conditional_oracle(model: &AbsorbedChainModel, start: &[f64], t: f64) -> Vec<f64> {
    let q = dense_generator(model, start.len());
    normalized(&transient_law(&q, start, t))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn two_state_flow_matches_matrix_exponential() {
    let model = zoo::two_state();
    let path = evolve_conditioned(&model, &Distribution::point(2).unwrap(), 1.0, 1e-3, 2).unwrap();
    let exact = conditional_oracle(&model, &[0.0, 1.0], 1.0);
    let err = sup_diff(&path.terminal().to_dense(2), &exact);
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn rk4_error_drops_sixteenfold() {
    let model = zoo::two_state();
    let exact = conditional_oracle(&model, &[0.0, 1.0], 1.0);
    let errs: Vec<f64> = [0.05, 0.025, 0.0125]
        .iter()
        .map(|&h| {
            let path = evolve_conditioned(&model, &Distribution::point(2).unwrap(), 1.0, h, 2).unwrap();
            sup_diff(&path.terminal().to_dense(2), &exact)
        })
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((12.0..=20.0).contains(&ratio), "{errs:?}");
    }
}

#[test]
fn flow_from_dirac_on_a_longer_chain() {
    let model = zoo::resolve("bd:1,2,10").unwrap();
    let path = evolve_conditioned(&model, &Distribution::point(5).unwrap(), 2.0, 1e-3, 10).unwrap();
    let mut start = vec![0.0; 10];
    start[4] = 1.0;
    let exact = conditional_oracle(&model, &start, 2.0);
    assert!(sup_diff(&path.terminal().to_dense(10), &exact) <= 1e-8);
}

#[test]
fn birth_death_oracle_residual() {
    let model = zoo::resolve("bd:1,2,100").unwrap();
    let sol = solve_qsd_power(&model, 100, 1e-13, DEFAULT_MAX_ITERS).unwrap();
    assert!(qsd_residual(&model, &sol.nu).sup_norm() <= 1e-9);
    assert!((sol.theta + sol.lambda).abs() <= 1e-9);
    assert!((theta_of(&model, &sol.nu) - sol.theta).abs() <= 1e-9);
}

#[test]
fn uniform_law_is_not_a_qsd() {
    let model = zoo::two_state();
    let u = Distribution::uniform([1, 2]).unwrap();
    assert!(qsd_residual(&model, &u).sup_norm() > 0.1);
}

#[test]
fn truncation_error_shrinks_with_k() {
    let model = zoo::resolve("bd:1,2").unwrap();
    let reference = minimal_qsd_reference(&model.restrict(800).model, &[], 1.0, 1e-12, DEFAULT_MAX_ITERS).unwrap();
    let tv: Vec<f64> = [50, 100, 200]
        .iter()
        .map(|&k| {
            solve_qsd_power(&model, k, 1e-12, DEFAULT_MAX_ITERS)
                .unwrap()
                .nu
                .total_variation(&reference.nu)
        })
        .collect();
    assert!(tv[0] > tv[1] && tv[1] > tv[2], "{tv:?}");
}

fn finite_instances() -> Vec<AbsorbedChainModel> {
    let mut out = vec![zoo::point(), zoo::two_state()];
    for name in ["bd:1,2,100", "bd:0.5,1,20", "bd:3,1,12"] {
        out.push(zoo::resolve(name).unwrap());
    }
    out.push(
        zoo::build_finite(
            &[vec![0.0, 2.0, 0.5], vec![0.3, 0.0, 1.0], vec![1.5, 0.2, 0.0]],
            &[0.0, 0.7, 0.1],
        )
        .unwrap(),
    );
    out
}

fn check_finite(model: &AbsorbedChainModel) {
    let k = model.num_states().unwrap();
    let sol = solve_qsd_power(model, k, 1e-13, DEFAULT_MAX_ITERS).unwrap();
    assert!((sol.theta + sol.lambda).abs() <= 1e-9);
    assert!((theta_of(model, &sol.nu) - sol.theta).abs() <= 1e-9);
    assert!(qsd_residual(model, &sol.nu).sup_norm() <= 1e-9);

    let d = zoo::uniformize(model, None).unwrap();
    let disc = solve_qsd_discrete(&d, 1e-14, DEFAULT_MAX_ITERS).unwrap();
    assert!(disc.nu.total_variation(&sol.nu) <= 1e-10, "{}", disc.nu.total_variation(&sol.nu));
    // λ_P = 1 + λ_Q / Λ
    let rate = d.uniformization_rate().unwrap();
    assert!((disc.lambda - (1.0 + sol.lambda / rate)).abs() <= 1e-9);
}

#[test]
fn theta_identity_and_uniformization_on_instances() {
    for model in finite_instances() {
        check_finite(&model);
    }
}

fn random_model() -> impl Strategy<Value = AbsorbedChainModel> {
    (2usize..6).prop_flat_map(|k| {
        (
            prop::collection::vec(prop::collection::vec(0.05f64..3.0, k), k),
            prop::collection::vec(0.0f64..2.0, k),
            0..k,
        )
            .prop_map(move |(mut rates, mut absorb, hole)| {
                for (i, row) in rates.iter_mut().enumerate() {
                    row[i] = 0.0;
                }
                absorb[hole] += 0.1;
                zoo::build_finite(&rates, &absorb).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_finite_chains(model in random_model()) {
        check_finite(&model);
    }
}

#[test]
fn galton_watson_rates_scale() {
    let model = zoo::resolve("gw:1,2").unwrap();
    for n in 1..200 {
        let up = |x: usize| model.jumps(x).iter().find(|e| e.0 == x + 1).unwrap().1;
        assert_eq!(up(2 * n), 2.0 * up(n));
    }
}
