mod common;

use common::{chi_square_fit, histogram, two_sample_chi_square};
use qsd_core::distribution::Distribution;
use qsd_core::flow::{evolve_conditioned, ConditionedPath};
use qsd_core::fv::{mean_field_drift, FvSimulator, ParticleConfig};
use qsd_core::graphical::graphical_fv;
use qsd_core::oracle::{solve_qsd_power, DEFAULT_MAX_ITERS};
use qsd_core::replicas::{mean_se, run_replicas};
use qsd_core::return_process::{phi_iterate, simulate_tagged_limit};
use qsd_core::rng::RngStream;
use qsd_core::zoo;

const ALPHA: f64 = 0.01;

fn gillespie_count_at_one(positions: &[usize], t: f64, root: &RngStream, replicas: usize) -> Vec<usize> {
    let model = zoo::two_state();
    run_replicas(root, replicas, |_, mut rng| {
        let cfg = ParticleConfig::from_positions(&model, positions.to_vec()).unwrap();
        let mut sim = FvSimulator::new(&model, cfg);
        sim.advance_to(t, &mut rng).unwrap();
        sim.config().count(1)
    })
}

fn split_positions(n: usize) -> Vec<usize> {
    (0..n).map(|i| if i < n / 2 { 1 } else { 2 }).collect()
}

#[test]
fn relabelling_particles_keeps_the_law() {
    let n = 20;
    let forward = split_positions(n);
    let mut backward = forward.clone();
    backward.reverse();
    let a = gillespie_count_at_one(&forward, 1.0, &RngStream::at(11, vec![1]), 2000);
    let b = gillespie_count_at_one(&backward, 1.0, &RngStream::at(11, vec![2]), 2000);
    let p = two_sample_chi_square(&histogram(&a, n), &histogram(&b, n));
    assert!(p > ALPHA, "p = {p}");
}

#[test]
fn graphical_and_gillespie_kernels_agree() {
    let n = 20;
    let model = zoo::two_state();
    let positions = split_positions(n);
    let a = gillespie_count_at_one(&positions, 1.0, &RngStream::at(12, vec![1]), 2000);
    let b = run_replicas(&RngStream::at(12, vec![2]), 2000, |_, rng| {
        let m = graphical_fv(&model, positions.clone(), 1.0, &rng, u64::MAX).unwrap();
        (m.mass(1) * n as f64).round() as usize
    });
    let p = two_sample_chi_square(&histogram(&a, n), &histogram(&b, n));
    assert!(p > ALPHA, "p = {p}");
}

#[test]
fn short_window_drift_matches_generator() {
    let model = zoo::two_state();
    let n = 50;
    let h = 1e-3;
    let positions: Vec<usize> = (0..n).map(|i| if i < 20 { 1 } else { 2 }).collect();
    let cfg = ParticleConfig::from_positions(&model, positions).unwrap();
    let m0 = cfg.empirical();
    let increments = run_replicas(&RngStream::new(13), 200_000, |_, mut rng| {
        let mut sim = FvSimulator::new(&model, cfg.clone());
        sim.advance_to(h, &mut rng).unwrap();
        (sim.config().empirical().mass(1) - m0.mass(1)) / h
    });
    let (mean, se) = mean_se(&increments);

    let exact = mean_field_drift(&model, &m0, n).into_iter().find(|e| e.0 == 1).unwrap().1;
    // Σ_x q(x,1) m(x) + N/(N−1) Σ_x q(x,0) m(x) m(1)
    let nf = n as f64;
    let m1 = m0.mass(1);
    let m2 = m0.mass(2);
    let generator_form = -2.0 * m1 + m2 + nf / (nf - 1.0) * m1 * m1;
    for target in [exact, generator_form] {
        assert!((mean - target).abs() <= 3.0 * se, "mean {mean} se {se} target {target}");
    }
}

#[test]
fn tagged_limit_is_stationary_under_the_qsd() {
    let model = zoo::two_state();
    let nu = solve_qsd_power(&model, 2, 1e-13, DEFAULT_MAX_ITERS).unwrap().nu;
    let path = ConditionedPath::constant(&nu, 1.0);
    let finals = run_replicas(&RngStream::new(14), 4000, |_, mut rng| {
        let y0 = nu.sample(&mut rng);
        simulate_tagged_limit(&model, &path, y0, 1.0, &mut rng).unwrap().final_state - 1
    });
    let p = chi_square_fit(&histogram(&finals, 1), &nu.to_dense(2));
    assert!(p > ALPHA, "p = {p}");
}

#[test]
fn tagged_limit_has_the_conditioned_marginal() {
    let model = zoo::two_state();
    let path = evolve_conditioned(&model, &Distribution::point(2).unwrap(), 1.0, 1e-3, 2).unwrap();
    let finals = run_replicas(&RngStream::new(15), 4000, |_, mut rng| {
        simulate_tagged_limit(&model, &path, 2, 1.0, &mut rng).unwrap().final_state - 1
    });
    let p = chi_square_fit(&histogram(&finals, 1), &path.terminal().to_dense(2));
    assert!(p > ALPHA, "p = {p}");
}

#[test]
fn phi_steps_shrink() {
    let model = zoo::two_state();
    let run = phi_iterate(&model, &Distribution::point(1).unwrap(), 200, 1e-14).unwrap();
    for w in run.log.windows(2).skip(5) {
        assert!(w[1] <= w[0] + 1e-12, "{:?}", run.log);
    }
}
