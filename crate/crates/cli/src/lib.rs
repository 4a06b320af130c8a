//! Config-driven runner over the `qsd-core` estimators.

pub mod config;
pub mod fit;
pub mod methods;
pub mod output;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use qsd_core::rng::RngStream;
use serde_json::json;
use thiserror::Error;

use config::{ConfigError, ExperimentConfig, Method};
use output::{json_bytes, write_atomic, write_payload, Payload};

/// Output directory when neither the config nor the command line names one.
pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{method} failed: {source:#}")]
    Method {
        method: &'static str,
        source: anyhow::Error,
    },
    #[error("writing outputs: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub method: Method,
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

/// Computes the payload of a validated config without writing anything.
pub fn compute(cfg: &ExperimentConfig) -> Result<Payload, RunError> {
    cfg.validate()?;
    let model = cfg.resolve_model()?;
    let root = RngStream::new(cfg.seed);
    let r = cfg.replicas;
    let result = match cfg.method {
        Method::Oracle => methods::oracle(&model, cfg.oracle.as_ref().unwrap()),
        Method::Conditioned => methods::conditioned(&model, cfg.conditioned.as_ref().unwrap()),
        Method::Fv => methods::fv(&model, cfg.fv.as_ref().unwrap(), r, &root),
        Method::Phi => methods::phi(&model, cfg.phi.as_ref().unwrap()),
        Method::Couple => methods::couple(&model, cfg.couple.as_ref().unwrap(), r, &root),
        Method::Afp => methods::afp(&model, cfg.afp.as_ref().unwrap(), r, &root),
        Method::Branch => methods::branch(&model, cfg.branch.as_ref().unwrap(), r, &root),
        Method::Scan => methods::scan(&model, cfg.scan.as_ref().unwrap(), r, &root),
        Method::Report => report::cross_method_report(&model, cfg.report.as_ref().unwrap(), &root).map(|rep| report::payload(&rep)),
    };
    result.map_err(|source| RunError::Method {
        method: cfg.method.name(),
        source,
    })
}

/// Runs `cfg` and writes `<method>.csv`, `<method>.json`, `<method>.gp`,
/// the resolved `config.toml` and a `run_summary.json` sidecar (the only
/// file carrying timings) under `out_dir`.
pub fn run_config(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunRecord, RunError> {
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();
    let payload = compute(cfg)?;
    let wall = clock.elapsed().as_secs_f64();

    let name = cfg.method.name();
    let mut files = write_payload(&dir, name, &payload, cfg.output.csv(), cfg.output.json())?;
    let config_path = dir.join("config.toml");
    write_atomic(&config_path, cfg.emit().as_bytes())?;
    files.push(config_path);
    let summary = json!({
        "method": name,
        "model": cfg.model,
        "seed": cfg.seed,
        "replicas": cfg.replicas,
        "threads": rayon::current_num_threads(),
        "started_unix_s": started,
        "wall_time_s": wall,
        "files": files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>(),
        "stats": payload.stats,
    });
    let summary_path = dir.join("run_summary.json");
    write_atomic(&summary_path, &json_bytes(&summary))?;
    files.push(summary_path);
    Ok(RunRecord {
        method: cfg.method,
        files,
        summary,
    })
}
