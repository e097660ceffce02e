use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchcert::config::RunConfig;
use patchcert::experiment::SweepParam;
use patchcert::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "patchcert", version, about = "Certified detection of adversarial patches")]
struct Cli {
    /// Config file of `key = value` lines; defaults apply to missing keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set tau=0.5`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Directory for reports and cached models.
    #[arg(short, long, default_value = "patchcert-out", global = true)]
    out: PathBuf,

    /// Fail unless the resolved config hashes to this fingerprint.
    #[arg(long, global = true)]
    fingerprint: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the vanilla model and its pruned finetune.
    Train,
    /// Optimise a universal patch and score it against the defense.
    Attack,
    /// Certify every test image.
    Certify,
    /// Run detection on benign and patched test images.
    Detect {
        /// Patch tensor to apply; forged from the config when absent.
        #[arg(long)]
        patch: Option<PathBuf>,
    },
    /// Occlude alerted suspects and re-predict.
    Recover {
        #[arg(long)]
        patch: Option<PathBuf>,
    },
    /// Cluster analysis of superficial winners with and without a patch.
    Analyze {
        #[arg(long)]
        patch: Option<PathBuf>,
    },
    /// Re-evaluate the defense over a list of parameter values.
    Sweep {
        /// One of tau, patch, winner_rate, layer.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values; patch sides may be given as a percentage
        /// of image area, e.g. `2%`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn resolve(cli: &Cli) -> patchcert::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    if let Some(fp) = &cli.fingerprint {
        cfg.verify_fingerprint(fp)?;
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::LayerShape { .. } | Error::Io(_) => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> patchcert::Result<()> {
    let cfg = resolve(cli)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    }
    let ctx = commands::Context::new(cfg, cli.out.clone())?;
    match &cli.command {
        Command::Train => ctx.train(),
        Command::Attack => ctx.attack(),
        Command::Certify => ctx.certify(),
        Command::Detect { patch } => ctx.detect(patch.as_deref()),
        Command::Recover { patch } => ctx.recover(patch.as_deref()),
        Command::Analyze { patch } => ctx.analyze(patch.as_deref()),
        Command::Sweep { param, values } => ctx.sweep(*param, values),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("patchcert: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
