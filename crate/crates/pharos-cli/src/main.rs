//! `pharos`: generate data, train, encode, attack, evaluate, adversarially
//! train, and report — all against one output directory.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data or format error,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use pharos_cli::config::ExperimentConfig;
use pharos_cli::pipeline;
use pharos_core::attack::{AttackMethod, Budget};
use pharos_core::Error;

#[derive(Parser)]
#[command(
    name = "pharos",
    version,
    about = "Adversarial robustness pipeline for hashing-based retrieval"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed overriding every per-section seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory holding all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Default)]
struct AttackOverrides {
    /// Attack method: pga | pga-dagger | pga-weighted | hag | anchor-targeted.
    #[arg(long)]
    method: Option<String>,
    /// L∞ budget ε, rational ("8/255") or decimal.
    #[arg(long)]
    epsilon: Option<String>,
    /// PGD step size η, rational or decimal.
    #[arg(long)]
    eta: Option<String>,
    /// PGD iteration count T.
    #[arg(long)]
    steps: Option<usize>,
    /// Convergence margin t in (−1, 0).
    #[arg(long)]
    t: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (dataset.phf).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the baseline hashing model (model.phm).
    Train {
        #[command(flatten)]
        common: Common,
        /// Code length K.
        #[arg(long)]
        bits: Option<usize>,
    },
    /// Encode both splits into .phc codes and .phl labels.
    Encode {
        #[command(flatten)]
        common: Common,
        /// Model artifact to encode with.
        #[arg(long, default_value = pipeline::MODEL_FILE)]
        model: String,
        #[arg(long)]
        bits: Option<usize>,
    },
    /// Attack the query split (adv_<tag>.pha).
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: AttackOverrides,
        /// Model artifact to attack.
        #[arg(long, default_value = pipeline::MODEL_FILE)]
        model: String,
        /// Output tag (defaults to the method name).
        #[arg(long)]
        tag: Option<String>,
    },
    /// Evaluate retrieval metrics (metrics_<tag>.json plus curves).
    Eval {
        #[command(flatten)]
        common: Common,
        /// "clean" or a previous attack's tag.
        #[arg(long, default_value = "clean")]
        attack: String,
        /// MAP cutoff N.
        #[arg(long)]
        topn: Option<usize>,
        /// Model artifact to rank with.
        #[arg(long, default_value = pipeline::MODEL_FILE)]
        model: String,
        /// Output tag (defaults to the attack tag).
        #[arg(long)]
        tag: Option<String>,
    },
    /// Adversarially train the defended model (model_adv.phm).
    Advtrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: AttackOverrides,
        #[arg(long)]
        bits: Option<usize>,
    },
    /// Aggregate every metrics file into report.json / report.csv.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve_config(
    common: &Common,
    bits: Option<usize>,
    topn: Option<usize>,
    overrides: &AttackOverrides,
) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(bits) = bits {
        cfg.model.bits = bits;
    }
    if let Some(topn) = topn {
        cfg.eval.topn = topn;
    }
    if let Some(method) = &overrides.method {
        cfg.attack.method = AttackMethod::from_str(method)?;
    }
    if let Some(eps) = &overrides.epsilon {
        cfg.attack.epsilon = Budget::from_str(eps)?;
    }
    if let Some(eta) = &overrides.eta {
        cfg.attack.eta = Budget::from_str(eta)?;
    }
    if let Some(steps) = overrides.steps {
        cfg.attack.steps = steps;
    }
    if let Some(t) = overrides.t {
        cfg.attack.margin = t;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn init_workers(common: &Common) -> Result<(), Error> {
    if let Some(workers) = common.workers {
        if workers == 0 {
            return Err(Error::config("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::config(format!("cannot size worker pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let none = AttackOverrides::default();
    match cli.cmd {
        Cmd::GenData { common } => {
            let cfg = resolve_config(&common, None, None, &none)?;
            init_workers(&common)?;
            pipeline::cmd_gen_data(&cfg, &common.out)
        }
        Cmd::Train { common, bits } => {
            let cfg = resolve_config(&common, bits, None, &none)?;
            init_workers(&common)?;
            pipeline::cmd_train(&cfg, &common.out)
        }
        Cmd::Encode { common, model, bits } => {
            let cfg = resolve_config(&common, bits, None, &none)?;
            init_workers(&common)?;
            pipeline::cmd_encode(&cfg, &common.out, &model)
        }
        Cmd::Attack { common, overrides, model, tag } => {
            let cfg = resolve_config(&common, None, None, &overrides)?;
            init_workers(&common)?;
            let tag = tag.unwrap_or_else(|| cfg.attack.method.tag().to_string());
            pipeline::cmd_attack(&cfg, &common.out, &model, &tag).map(|_| ())
        }
        Cmd::Eval { common, attack, topn, model, tag } => {
            let cfg = resolve_config(&common, None, topn, &none)?;
            init_workers(&common)?;
            let tag = tag.unwrap_or_else(|| attack.clone());
            let report = pipeline::cmd_eval(&cfg, &common.out, &model, &attack, &tag)?;
            println!("map[{tag}] = {:.6}", report.map);
            Ok(())
        }
        Cmd::Advtrain { common, overrides, bits } => {
            let cfg = resolve_config(&common, bits, None, &overrides)?;
            init_workers(&common)?;
            pipeline::cmd_advtrain(&cfg, &common.out)
        }
        Cmd::Report { common } => {
            let cfg = resolve_config(&common, None, None, &none)?;
            let _ = cfg; // report only aggregates existing artifacts
            let report = pipeline::cmd_report(&common.out)?;
            for row in &report.rows {
                println!("{:<16} map = {:.6}", row.tag, row.map);
            }
            Ok(())
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::InvalidInput(msg) if msg.starts_with("numerical failure") => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
