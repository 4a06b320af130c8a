//! Every estimator on one finite chain, scored against the oracle.

use std::time::Instant;

use anyhow::{Context, Result};
use qsd_core::afp::afp_run;
use qsd_core::branching::{build_shifted, ks_estimate, AlphaChoice, KsSettings};
use qsd_core::distribution::Distribution;
use qsd_core::fv::{default_burn_in, fv_stationary};
use qsd_core::model::AbsorbedChainModel;
use qsd_core::oracle::{solve_qsd_power, QsdSolution, DEFAULT_MAX_ITERS};
use qsd_core::return_process::phi_iterate;
use qsd_core::rng::RngStream;
use qsd_core::zoo;
use serde::Serialize;
use serde_json::json;

use crate::config::ReportParams;
use crate::output::{csv_bytes, json_bytes, Payload, PlotSpec};

#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub method: &'static str,
    pub tv_to_oracle: Option<f64>,
    /// `ok`, or the failure message.
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub truncation: Option<usize>,
    pub oracle: QsdSolution,
    pub rows: Vec<ReportRow>,
    pub estimates: Vec<(&'static str, Option<Distribution>)>,
    /// Wall time per method in seconds.
    pub runtimes: Vec<(&'static str, f64)>,
}

impl Report {
    pub fn tv(&self, method: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method).and_then(|r| r.tv_to_oracle)
    }
}

/// Runs the oracle, stationary FV, Φ iteration, history renewal and the
/// branching estimate. Infinite chains are first restricted to
/// `{1..p.trunc}`. Failed methods are recorded, not fatal.
pub fn cross_method_report(model: &AbsorbedChainModel, p: &ReportParams, root: &RngStream) -> Result<Report> {
    let (work, truncation) = match model.num_states() {
        Some(_) => (model.clone(), None),
        None => (model.restrict(p.trunc).model, Some(p.trunc)),
    };
    let k = work.num_states().unwrap();
    let start = Instant::now();
    let oracle = solve_qsd_power(&work, k, 1e-12, DEFAULT_MAX_ITERS).context("oracle")?;
    let mut runtimes = vec![("oracle", start.elapsed().as_secs_f64())];
    let delta = Distribution::point(1).unwrap();

    type Attempt = Result<Distribution, String>;
    let methods: Vec<(&'static str, Box<dyn Fn() -> Attempt + '_>)> = vec![
        (
            "fv",
            Box::new(|| {
                let mut rng = root.child(1);
                fv_stationary(&work, p.particles, &delta, default_burn_in(p.fv_horizon), p.fv_horizon, &mut rng)
                    .map(|e| e.measure)
                    .map_err(|e| e.to_string())
            }),
        ),
        (
            "phi",
            Box::new(|| {
                phi_iterate(&work, &delta, p.phi_iters, 1e-10)
                    .map(|r| r.last)
                    .map_err(|e| e.to_string())
            }),
        ),
        (
            "afp",
            Box::new(|| {
                let d = zoo::uniformize(&work, None).map_err(|e| e.to_string())?;
                afp_run(&d, 1, p.afp_steps, 1, None, &mut root.child(3))
                    .map(|r| r.estimate)
                    .map_err(|e| e.to_string())
            }),
        ),
        (
            "branch",
            Box::new(|| {
                let sm = build_shifted(&work, AlphaChoice::Auto).map_err(|e| e.to_string())?;
                let settings = KsSettings {
                    horizon: p.branch_horizon,
                    cap: p.branch_cap,
                    replicas: p.branch_replicas,
                    restarts: 100,
                    start: 1,
                };
                ks_estimate(&sm, settings, &root.child(4))
                    .map(|e| e.nu_hat)
                    .map_err(|e| e.to_string())
            }),
        ),
    ];

    let mut rows = vec![ReportRow {
        method: "oracle",
        tv_to_oracle: Some(0.0),
        status: "ok".into(),
    }];
    let mut estimates = vec![("oracle", Some(oracle.nu.clone()))];
    for (name, run) in methods {
        let t = Instant::now();
        let outcome = run();
        runtimes.push((name, t.elapsed().as_secs_f64()));
        match outcome {
            Ok(est) => {
                rows.push(ReportRow {
                    method: name,
                    tv_to_oracle: Some(est.total_variation(&oracle.nu)),
                    status: "ok".into(),
                });
                estimates.push((name, Some(est)));
            }
            Err(msg) => {
                rows.push(ReportRow {
                    method: name,
                    tv_to_oracle: None,
                    status: format!("failed: {msg}"),
                });
                estimates.push((name, None));
            }
        }
    }
    Ok(Report {
        truncation,
        oracle,
        rows,
        estimates,
        runtimes,
    })
}

pub fn payload(report: &Report) -> Payload {
    let doc = json!({
        "K": report.truncation,
        "oracle": report.oracle.nu,
        "theta": report.oracle.theta,
        "rows": report.rows,
        "estimates": report.estimates.iter().map(|(m, e)| json!({ "method": m, "estimate": e })).collect::<Vec<_>>(),
    });
    Payload {
        csv: csv_bytes(&report.rows),
        columns: vec!["method", "tv_to_oracle", "status"],
        json: json_bytes(&doc),
        plot: Some(PlotSpec {
            title: "TV to oracle by method".into(),
            x: "method",
            y: "tv_to_oracle",
            log_x: false,
            log_y: true,
            group_by: None,
            categorical: true,
        }),
        stats: json!({
            "runtime_s": report.runtimes.iter().map(|(m, s)| json!({ "method": m, "seconds": s })).collect::<Vec<_>>(),
        }),
    }
}
