use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qsd_cli::config::{
    AfpParams, AlphaSetting, BranchParams, ConditionedParams, CoupleParams, DistSpec, ExperimentConfig, FvParams,
    Method, OracleParams, OutputFormat, PhiParams, ReportParams, ScanParams,
};
use qsd_cli::run_config;

#[derive(Parser)]
#[command(name = "qsd", version, about = "Quasi-stationary distributions of absorbed Markov chains")]
struct Cli {
    /// Run an experiment file instead of a subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    replicas: usize,
    /// Which data files to write.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Both)]
    out: OutputFormat,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct ModelArg {
    /// point, two-state, bd:p,q[,K], gw:b,d or file:<path>
    #[arg(long)]
    model: String,
}

#[derive(Subcommand)]
enum Command {
    /// Principal QSD by power iteration.
    Oracle {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long)]
        trunc: Option<usize>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Conditioned law T_t(mu) on a time grid.
    Conditioned {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long, default_value = "delta:1")]
        init: DistSpec,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-2)]
        dt: f64,
        #[arg(long)]
        trunc: Option<usize>,
    },
    /// Fleming-Viot particle system.
    Fv {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long, default_value_t = 100)]
        particles: usize,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long)]
        burnin: Option<f64>,
        #[arg(long, default_value_t = 0.1)]
        grid: f64,
        #[arg(long, default_value = "delta:1")]
        init: DistSpec,
        #[arg(long)]
        trunc: Option<usize>,
    },
    /// Iterates mu -> Phi(mu).
    Phi {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long, default_value = "delta:1")]
        init: DistSpec,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Tagged FV particle coupled with its limit process.
    Couple {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long, default_value_t = 100)]
        particles: usize,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value = "delta:1")]
        init: DistSpec,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long)]
        trunc: Option<usize>,
    },
    /// History-renewal chain on the uniformized model.
    Afp {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long)]
        uniformization_rate: Option<f64>,
        #[arg(long, default_value_t = 100_000)]
        steps: u64,
        #[arg(long, default_value_t = 1)]
        start: usize,
        #[arg(long, default_value_t = 5)]
        checkpoints: usize,
    },
    /// Multitype branching estimate of the QSD.
    Branch {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long, default_value = "auto")]
        alpha: AlphaSetting,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        #[arg(long, default_value_t = 100_000)]
        cap: u64,
        #[arg(long, default_value_t = 100)]
        restarts: u64,
        #[arg(long, default_value_t = 1)]
        start: usize,
    },
    /// FV error against the conditioned flow over several N.
    Scan {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long, value_delimiter = ',', default_value = "50,200,800")]
        particles: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value = "delta:1")]
        init: DistSpec,
        #[arg(long, default_value_t = 1)]
        state: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long)]
        trunc: Option<usize>,
    },
    /// All estimators against the oracle.
    Report {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long, default_value_t = 200)]
        trunc: usize,
    },
}

fn build(cli: &Cli, command: &Command) -> ExperimentConfig {
    let cfg = |m: &ModelArg, method| {
        let mut c = ExperimentConfig::new(&m.model, method, cli.seed);
        c.replicas = cli.replicas;
        c.output = cli.out;
        c
    };
    match command {
        Command::Oracle { m, trunc, tol } => ExperimentConfig {
            oracle: Some(OracleParams {
                trunc: *trunc,
                tol: *tol,
                ..OracleParams::default()
            }),
            ..cfg(m, Method::Oracle)
        },
        Command::Conditioned { m, init, horizon, dt, trunc } => ExperimentConfig {
            conditioned: Some(ConditionedParams {
                init: init.clone(),
                horizon: *horizon,
                dt: *dt,
                trunc: *trunc,
            }),
            ..cfg(m, Method::Conditioned)
        },
        Command::Fv {
            m,
            particles,
            horizon,
            burnin,
            grid,
            init,
            trunc,
        } => ExperimentConfig {
            fv: Some(FvParams {
                particles: *particles,
                horizon: *horizon,
                grid: *grid,
                burnin: *burnin,
                init: init.clone(),
                trunc: *trunc,
            }),
            ..cfg(m, Method::Fv)
        },
        Command::Phi { m, init, iters, tol } => ExperimentConfig {
            phi: Some(PhiParams {
                init: init.clone(),
                iters: *iters,
                tol: *tol,
            }),
            ..cfg(m, Method::Phi)
        },
        Command::Couple {
            m,
            particles,
            horizon,
            init,
            dt,
            trunc,
        } => ExperimentConfig {
            couple: Some(CoupleParams {
                particles: *particles,
                horizon: *horizon,
                init: init.clone(),
                dt: *dt,
                trunc: *trunc,
            }),
            ..cfg(m, Method::Couple)
        },
        Command::Afp {
            m,
            uniformization_rate,
            steps,
            start,
            checkpoints,
        } => ExperimentConfig {
            afp: Some(AfpParams {
                uniformization_rate: *uniformization_rate,
                steps: *steps,
                start: *start,
                checkpoints: *checkpoints,
            }),
            ..cfg(m, Method::Afp)
        },
        Command::Branch {
            m,
            alpha,
            horizon,
            cap,
            restarts,
            start,
        } => ExperimentConfig {
            branch: Some(BranchParams {
                alpha: *alpha,
                horizon: *horizon,
                cap: *cap,
                restarts: *restarts,
                start: *start,
            }),
            ..cfg(m, Method::Branch)
        },
        Command::Scan {
            m,
            particles,
            horizon,
            init,
            state,
            dt,
            trunc,
        } => ExperimentConfig {
            scan: Some(ScanParams {
                particles: particles.clone(),
                horizon: *horizon,
                init: init.clone(),
                state: *state,
                dt: *dt,
                trunc: *trunc,
            }),
            ..cfg(m, Method::Scan)
        },
        Command::Report { m, trunc } => ExperimentConfig {
            report: Some(ReportParams {
                trunc: *trunc,
                ..ReportParams::default()
            }),
            ..cfg(m, Method::Report)
        },
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("QSD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("QSD_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let cfg = match (&cli.config, &cli.command) {
        (Some(path), None) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        (None, Some(cmd)) => build(&cli, cmd),
        (Some(_), Some(_)) => {
            eprintln!("error: give either --config or a subcommand, not both");
            return ExitCode::from(2);
        }
        (None, None) => {
            eprintln!("error: a subcommand or --config is required (see --help)");
            return ExitCode::from(2);
        }
    };
    match run_config(&cfg, cli.out_dir.as_deref()) {
        Ok(record) => {
            for f in &record.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
