//! Experiment configuration: a versioned TOML document with one table per
//! method.
//!
//! ```toml
//! schema = "qsdconfig/1"
//! model = "two-state"
//! method = "fv"
//! seed = 7
//! replicas = 200
//!
//! [fv]
//! particles = 400
//! horizon = 1.0
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qsd_core::distribution::Distribution;
use qsd_core::model::{AbsorbedChainModel, State};
use qsd_core::zoo;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA: &str = "qsdconfig/1";

#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("invalid config:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(vec![FieldError {
        field: field.into(),
        message: message.into(),
    }])
}

/// Initial laws: `delta:x`, `uniform:a-b`, `x:w,y:w,...` or `qsd`.
#[derive(Clone, Debug, PartialEq)]
pub enum DistSpec {
    Delta(State),
    Uniform(State, State),
    Weights(Vec<(State, f64)>),
    Qsd,
}

impl FromStr for DistSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "qsd" {
            return Ok(Self::Qsd);
        }
        let state = |t: &str| -> Result<State, String> {
            match t.trim().parse::<State>() {
                Ok(x) if x > 0 => Ok(x),
                _ => Err(format!("`{t}` is not a positive state")),
            }
        };
        if let Some(x) = s.strip_prefix("delta:") {
            return Ok(Self::Delta(state(x)?));
        }
        if let Some(r) = s.strip_prefix("uniform:") {
            let (a, b) = r.split_once('-').ok_or("expected uniform:a-b")?;
            let (a, b) = (state(a)?, state(b)?);
            if a > b {
                return Err("uniform range is empty".into());
            }
            return Ok(Self::Uniform(a, b));
        }
        let mut weights = Vec::new();
        for part in s.split(',') {
            let (x, w) = part
                .split_once(':')
                .ok_or_else(|| format!("unrecognized distribution `{s}`"))?;
            let w: f64 = w.trim().parse().map_err(|_| format!("bad weight `{w}`"))?;
            if !(w >= 0.0 && w.is_finite()) {
                return Err(format!("bad weight `{w}`"));
            }
            weights.push((state(x)?, w));
        }
        Ok(Self::Weights(weights))
    }
}

impl fmt::Display for DistSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Delta(x) => write!(f, "delta:{x}"),
            Self::Uniform(a, b) => write!(f, "uniform:{a}-{b}"),
            Self::Qsd => write!(f, "qsd"),
            Self::Weights(w) => {
                let parts: Vec<String> = w.iter().map(|(x, m)| format!("{x}:{m}")).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

impl Serialize for DistSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DistSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl DistSpec {
    /// Concrete law; `qsd` is resolved by the caller.
    pub fn concrete(&self) -> Option<Result<Distribution, String>> {
        let r = match self {
            Self::Delta(x) => Distribution::point(*x),
            Self::Uniform(a, b) => Distribution::uniform(*a..=*b),
            Self::Weights(w) => Distribution::from_weights(w.iter().copied()),
            Self::Qsd => return None,
        };
        Some(r.map_err(|e| e.to_string()))
    }
}

/// `auto` or a nonnegative number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaSetting {
    Auto,
    Fixed(f64),
}

impl Serialize for AlphaSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Auto => s.serialize_str("auto"),
            Self::Fixed(a) => s.serialize_f64(*a),
        }
    }
}

impl<'de> Deserialize<'de> for AlphaSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Int(i64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(a) => Ok(Self::Fixed(a)),
            Raw::Int(a) => Ok(Self::Fixed(a as f64)),
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl FromStr for AlphaSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        s.parse::<f64>()
            .map(Self::Fixed)
            .map_err(|_| format!("alpha must be `auto` or a number, got `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Oracle,
    Conditioned,
    Fv,
    Phi,
    Couple,
    Afp,
    Branch,
    Scan,
    Report,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::Conditioned => "conditioned",
            Self::Fv => "fv",
            Self::Phi => "phi",
            Self::Couple => "couple",
            Self::Afp => "afp",
            Self::Branch => "branch",
            Self::Scan => "scan",
            Self::Report => "report",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    #[default]
    Both,
}

impl OutputFormat {
    pub fn csv(self) -> bool {
        self != Self::Json
    }

    pub fn json(self) -> bool {
        self != Self::Csv
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub trunc: Option<usize>,
    pub tol: f64,
    /// TV between consecutive truncations accepted for infinite chains.
    pub stabilization: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            trunc: None,
            tol: 1e-10,
            stabilization: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionedParams {
    pub init: DistSpec,
    pub horizon: f64,
    pub dt: f64,
    pub trunc: Option<usize>,
}

impl Default for ConditionedParams {
    fn default() -> Self {
        Self {
            init: DistSpec::Delta(1),
            horizon: 1.0,
            dt: 1e-2,
            trunc: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FvParams {
    pub particles: usize,
    pub horizon: f64,
    pub grid: f64,
    /// When set, each replica also reports its time average over
    /// `(burnin, horizon]`.
    pub burnin: Option<f64>,
    pub init: DistSpec,
    /// Truncation for the conditioned-flow reference of infinite chains.
    pub trunc: Option<usize>,
}

impl Default for FvParams {
    fn default() -> Self {
        Self {
            particles: 100,
            horizon: 1.0,
            grid: 0.1,
            burnin: None,
            init: DistSpec::Delta(1),
            trunc: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhiParams {
    pub init: DistSpec,
    pub iters: usize,
    pub tol: f64,
}

impl Default for PhiParams {
    fn default() -> Self {
        Self {
            init: DistSpec::Delta(1),
            iters: 1000,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoupleParams {
    pub particles: usize,
    pub horizon: f64,
    pub init: DistSpec,
    pub dt: f64,
    pub trunc: Option<usize>,
}

impl Default for CoupleParams {
    fn default() -> Self {
        Self {
            particles: 100,
            horizon: 1.0,
            init: DistSpec::Delta(1),
            dt: 1e-3,
            trunc: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AfpParams {
    pub uniformization_rate: Option<f64>,
    pub steps: u64,
    pub start: State,
    pub checkpoints: usize,
}

impl Default for AfpParams {
    fn default() -> Self {
        Self {
            uniformization_rate: None,
            steps: 100_000,
            start: 1,
            checkpoints: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchParams {
    pub alpha: AlphaSetting,
    pub horizon: f64,
    pub cap: u64,
    pub restarts: u64,
    pub start: State,
}

impl Default for BranchParams {
    fn default() -> Self {
        Self {
            alpha: AlphaSetting::Auto,
            horizon: 10.0,
            cap: 100_000,
            restarts: 100,
            start: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanParams {
    pub particles: Vec<usize>,
    pub horizon: f64,
    pub init: DistSpec,
    /// State whose occupation fraction is compared with `T_tμ`.
    pub state: State,
    pub dt: f64,
    pub trunc: Option<usize>,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            particles: vec![50, 200, 800],
            horizon: 1.0,
            init: DistSpec::Delta(1),
            state: 1,
            dt: 1e-3,
            trunc: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportParams {
    /// Truncation applied to infinite chains.
    pub trunc: usize,
    pub particles: usize,
    pub fv_horizon: f64,
    pub phi_iters: usize,
    pub afp_steps: u64,
    pub branch_horizon: f64,
    pub branch_cap: u64,
    pub branch_replicas: usize,
}

impl Default for ReportParams {
    fn default() -> Self {
        Self {
            trunc: 200,
            particles: 500,
            fv_horizon: 200.0,
            phi_iters: 500,
            afp_steps: 1_000_000,
            branch_horizon: 12.0,
            branch_cap: 20_000,
            branch_replicas: 20,
        }
    }
}

/// A parsed experiment. Only the table of the selected method is used;
/// missing tables take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub model: String,
    pub method: Method,
    pub seed: u64,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub output: OutputFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioned: Option<ConditionedParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fv: Option<FvParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<PhiParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub couple: Option<CoupleParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub afp: Option<AfpParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<BranchParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportParams>,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    /// A config for `method` with default parameters.
    pub fn new(model: &str, method: Method, seed: u64) -> Self {
        let mut cfg = Self {
            schema: SCHEMA.into(),
            model: model.into(),
            method,
            seed,
            replicas: 1,
            out_dir: None,
            output: OutputFormat::Both,
            oracle: None,
            conditioned: None,
            fv: None,
            phi: None,
            couple: None,
            afp: None,
            branch: None,
            scan: None,
            report: None,
        };
        cfg.fill_method_defaults();
        cfg
    }

    /// Inserts the default table for the selected method if absent.
    pub fn fill_method_defaults(&mut self) {
        match self.method {
            Method::Oracle => drop(self.oracle.get_or_insert_with(Default::default)),
            Method::Conditioned => drop(self.conditioned.get_or_insert_with(Default::default)),
            Method::Fv => drop(self.fv.get_or_insert_with(Default::default)),
            Method::Phi => drop(self.phi.get_or_insert_with(Default::default)),
            Method::Couple => drop(self.couple.get_or_insert_with(Default::default)),
            Method::Afp => drop(self.afp.get_or_insert_with(Default::default)),
            Method::Branch => drop(self.branch.get_or_insert_with(Default::default)),
            Method::Scan => drop(self.scan.get_or_insert_with(Default::default)),
            Method::Report => drop(self.report.get_or_insert_with(Default::default)),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.fill_method_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn emit(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_model(&self) -> Result<AbsorbedChainModel, ConfigError> {
        zoo::resolve(&self.model).map_err(|e| invalid("model", e.to_string()))
    }

    /// Field-level checks; every problem is reported.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, field: &str, message: &str| {
            if !ok {
                errs.push(FieldError {
                    field: field.into(),
                    message: message.into(),
                });
            }
        };
        check(self.schema == SCHEMA, "schema", &format!("expected `{SCHEMA}`"));
        check(self.replicas >= 1, "replicas", "must be at least 1");
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let dist = |d: &DistSpec| d.concrete().is_none_or(|r| r.is_ok());
        match self.method {
            Method::Oracle => {
                let p = self.oracle.as_ref().unwrap();
                check(positive(p.tol), "oracle.tol", "must be positive");
                check(positive(p.stabilization), "oracle.stabilization", "must be positive");
                check(p.trunc != Some(0), "oracle.trunc", "must be positive");
            }
            Method::Conditioned => {
                let p = self.conditioned.as_ref().unwrap();
                check(positive(p.horizon), "conditioned.horizon", "must be positive");
                check(positive(p.dt), "conditioned.dt", "must be positive");
                check(dist(&p.init), "conditioned.init", "not a distribution");
                check(p.trunc != Some(0), "conditioned.trunc", "must be positive");
            }
            Method::Fv => {
                let p = self.fv.as_ref().unwrap();
                check(p.particles >= 2, "fv.particles", "need at least 2 particles");
                check(positive(p.horizon), "fv.horizon", "must be positive");
                check(positive(p.grid), "fv.grid", "must be positive");
                check(
                    p.burnin.is_none_or(|b| (0.0..p.horizon).contains(&b)),
                    "fv.burnin",
                    "must lie in [0, horizon)",
                );
                check(dist(&p.init), "fv.init", "not a distribution");
                check(p.trunc != Some(0), "fv.trunc", "must be positive");
            }
            Method::Phi => {
                let p = self.phi.as_ref().unwrap();
                check(p.iters >= 1, "phi.iters", "must be at least 1");
                check(positive(p.tol), "phi.tol", "must be positive");
                check(dist(&p.init), "phi.init", "not a distribution");
            }
            Method::Couple => {
                let p = self.couple.as_ref().unwrap();
                check(p.particles >= 2, "couple.particles", "need at least 2 particles");
                check(positive(p.horizon), "couple.horizon", "must be positive");
                check(positive(p.dt), "couple.dt", "must be positive");
                check(dist(&p.init), "couple.init", "not a distribution");
                check(p.trunc != Some(0), "couple.trunc", "must be positive");
            }
            Method::Afp => {
                let p = self.afp.as_ref().unwrap();
                check(p.steps >= 1, "afp.steps", "must be at least 1");
                check(p.start >= 1, "afp.start", "must be a positive state");
                check(p.checkpoints >= 1, "afp.checkpoints", "must be at least 1");
                check(
                    p.uniformization_rate.is_none_or(positive),
                    "afp.uniformization_rate",
                    "must be positive",
                );
            }
            Method::Branch => {
                let p = self.branch.as_ref().unwrap();
                check(positive(p.horizon), "branch.horizon", "must be positive");
                check(p.cap >= 2, "branch.cap", "must be at least 2");
                check(p.start >= 1, "branch.start", "must be a positive state");
                if let AlphaSetting::Fixed(a) = p.alpha {
                    check(a >= 0.0 && a.is_finite(), "branch.alpha", "must be nonnegative or `auto`");
                }
            }
            Method::Scan => {
                let p = self.scan.as_ref().unwrap();
                let mut distinct = p.particles.clone();
                distinct.sort_unstable();
                distinct.dedup();
                check(distinct.len() >= 2, "scan.particles", "need at least 2 distinct sizes");
                check(p.particles.iter().all(|&n| n >= 2), "scan.particles", "sizes must be at least 2");
                check(positive(p.horizon), "scan.horizon", "must be positive");
                check(positive(p.dt), "scan.dt", "must be positive");
                check(p.state >= 1, "scan.state", "must be a positive state");
                check(dist(&p.init), "scan.init", "not a distribution");
                check(p.trunc != Some(0), "scan.trunc", "must be positive");
            }
            Method::Report => {
                let p = self.report.as_ref().unwrap();
                check(p.trunc >= 1, "report.trunc", "must be positive");
                check(p.particles >= 2, "report.particles", "need at least 2 particles");
                check(positive(p.fv_horizon), "report.fv_horizon", "must be positive");
                check(positive(p.branch_horizon), "report.branch_horizon", "must be positive");
                check(p.branch_cap >= 2, "report.branch_cap", "must be at least 2");
                check(p.branch_replicas >= 1, "report.branch_replicas", "must be at least 1");
            }
        }
        if let Err(e) = zoo::resolve(&self.model) {
            errs.push(FieldError {
                field: "model".into(),
                message: e.to_string(),
            });
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}
