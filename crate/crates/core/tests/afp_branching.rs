use qsd_core::afp::{afp_run, afp_step, HistoryState};
use qsd_core::branching::{build_shifted, downsample, ks_estimate, sample_offspring, AlphaChoice, KsSettings};
use qsd_core::flow::theta_of;
use qsd_core::oracle::{solve_qsd_discrete, solve_qsd_power, DEFAULT_MAX_ITERS};
use qsd_core::replicas::{mean_se, run_replicas};
use qsd_core::rng::RngStream;
use qsd_core::zoo;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn history_mass_grows_by_one() {
    let d = zoo::uniformize(&zoo::resolve("bd:1,2,30").unwrap(), None).unwrap();
    let mut h = HistoryState::new(&d, 3).unwrap();
    let mut rng = RngStream::new(1);
    let mut before: Vec<u64> = (1..=30).map(|x| h.count(x)).collect();
    for n in 1..=20_000u64 {
        afp_step(&mut h, &d, &mut rng).unwrap();
        assert_eq!(h.total(), 1 + n);
        if n % 1000 == 0 {
            let now: Vec<u64> = (1..=30).map(|x| h.count(x)).collect();
            assert!(now.iter().zip(&before).all(|(a, b)| a >= b));
            before = now;
        }
    }
}

#[test]
fn checkpoint_medians_do_not_increase() {
    let d = zoo::uniformize(&zoo::two_state(), Some(2.0)).unwrap();
    let oracle = solve_qsd_discrete(&d, 1e-14, DEFAULT_MAX_ITERS).unwrap().nu;
    let runs = run_replicas(&RngStream::new(2), 20, |_, mut rng| {
        afp_run(&d, 1, 200_000, 3, Some(&oracle), &mut rng).unwrap()
    });
    let medians: Vec<f64> = (0..3)
        .map(|i| median(runs.iter().map(|r| r.checkpoints[i].tv_to_reference.unwrap()).collect()))
        .collect();
    assert!(medians[0] >= medians[1] && medians[1] >= medians[2], "{medians:?}");
}

#[test]
fn afp_replays() {
    let d = zoo::uniformize(&zoo::two_state(), Some(2.0)).unwrap();
    let a = afp_run(&d, 2, 10_000, 4, None, &mut RngStream::new(3)).unwrap();
    let b = afp_run(&d, 2, 10_000, 4, None, &mut RngStream::new(3)).unwrap();
    assert_eq!(a.estimate, b.estimate);
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(x.estimate, y.estimate);
    }
}

#[test]
fn offspring_means_match() {
    let sm = build_shifted(&zoo::two_state(), AlphaChoice::Fixed(2.0)).unwrap();
    let events = 100_000;
    for x in 1..=2 {
        let mut rng = RngStream::at(4, vec![x as u64]);
        let mut sums = [0.0f64; 2];
        for _ in 0..events {
            let o = sample_offspring(&sm, x, &mut rng);
            sums[0] += o[0] as f64;
            sums[1] += o[1] as f64;
        }
        for y in 1..=2 {
            let target = sm.mean(x, y);
            let mean = sums[y - 1] / events as f64;
            // Poisson: variance equals the mean
            let se = (target / events as f64).sqrt();
            assert!((mean - target).abs() <= 3.0 * se, "m({x},{y}) {mean} vs {target}");
        }
    }
}

#[test]
fn downsampling_keeps_proportions() {
    let counts = [300u64, 0, 700, 1000];
    let total: u64 = counts.iter().sum();
    let props = run_replicas(&RngStream::new(5), 2000, |_, mut rng| {
        let kept = downsample(&counts, 1000, &mut rng);
        assert_eq!(kept.iter().sum::<u64>(), 1000);
        kept.iter().map(|&c| c as f64 / 1000.0).collect::<Vec<_>>()
    });
    for (i, &c) in counts.iter().enumerate() {
        let column: Vec<f64> = props.iter().map(|p| p[i]).collect();
        let (mean, se) = mean_se(&column);
        let before = c as f64 / total as f64;
        assert!((mean - before).abs() <= 3.0 * se.max(1e-12), "type {i}: {mean} vs {before}");
    }
}

#[test]
fn branching_profile_recovers_theta() {
    let model = zoo::two_state();
    let sm = build_shifted(&model, AlphaChoice::Fixed(2.0)).unwrap();
    let settings = KsSettings {
        horizon: 10.0,
        cap: 10_000,
        replicas: 20,
        restarts: 50,
        start: 1,
    };
    let est = ks_estimate(&sm, settings, &RngStream::new(6)).unwrap();
    let oracle = solve_qsd_power(&model, 2, 1e-13, DEFAULT_MAX_ITERS).unwrap();
    assert!((theta_of(&model, &est.nu_hat) + oracle.lambda).abs() <= 0.1);
    assert!(est.survival_fraction > 0.0 && est.survival_fraction <= 1.0);
}
