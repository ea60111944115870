//! `omreid`: generate data, train, evaluate, rank and report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use omreid::eval::{FusionMode, SingletonMode};
use omreid::{Error, Result};
use omreid_cli::commands::{self, EvalArgs};
use omreid_cli::config::{Preset, RunConfig};

#[derive(Parser)]
#[command(name = "omreid", version, about = "Omni multi-modal person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::preset(self.preset.parse::<Preset>()?),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalFlags {
    /// Checkpoint to load; defaults to the one `train` writes.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Manifest to evaluate on; defaults to the test split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Seed of query-set construction; defaults to the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `fm` ranks with the feature mixture, `superposition` sums per-modality similarities.
    #[arg(long, default_value = "fm")]
    fusion: String,
    /// `fm` or `cls` representation of single-modality queries.
    #[arg(long, default_value = "fm")]
    singleton: String,
}

impl EvalFlags {
    fn resolve(&self, cfg: &RunConfig) -> Result<EvalArgs> {
        let d = EvalArgs::defaults(cfg);
        Ok(EvalArgs {
            checkpoint: self.checkpoint.clone().unwrap_or(d.checkpoint),
            manifest: self.manifest.clone().unwrap_or(d.manifest),
            seed: self.seed.unwrap_or(d.seed),
            fusion: self.fusion.parse::<FusionMode>()?,
            singleton: self.singleton.parse::<SingletonMode>()?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic five-modality dataset.
    Synth(ConfigArgs),
    /// Train, checkpoint and evaluate on the test split.
    Train(ConfigArgs),
    /// Evaluate a checkpoint over all query sets.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: EvalFlags,
    },
    /// Dump top-k ranking lists of one query set as JSON.
    Rank {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        flags: EvalFlags,
        /// Query modalities, primary first, e.g. `T+I`.
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Expert parameter and FLOP accounting.
    Params(ConfigArgs),
    /// Text entropy statistics of a manifest.
    Stats {
        manifest: PathBuf,
        /// Directory for `stats.json`; defaults to the manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = c.load()?;
            let meta = commands::cmd_synth(&cfg)?;
            println!(
                "wrote {} train / {} test samples ({} / {} identities) to {}",
                meta.train_samples,
                meta.test_samples,
                meta.train_identities,
                meta.test_identities,
                commands::data_dir(&cfg).display()
            );
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let out = commands::cmd_train(&cfg, |r| {
                if r.step % 10 == 0 {
                    eprintln!("epoch {:3} step {:5} loss {:.4} (sdm {:.4} ic {:.4})", r.epoch, r.step, r.loss, r.sdm, r.ic);
                }
            })?;
            print!("{}", out.report.to_table());
        }
        Command::Eval { config, flags } => {
            let cfg = config.load()?;
            let report = commands::cmd_eval(&cfg, &flags.resolve(&cfg)?)?;
            print!("{}", report.to_table());
        }
        Command::Rank { config, flags, query, k } => {
            let cfg = config.load()?;
            let dump = commands::cmd_rank(&cfg, &flags.resolve(&cfg)?, &query, k)?;
            println!("{}", serde_json::to_string_pretty(&dump).expect("plain data serializes"));
        }
        Command::Params(c) => {
            let cfg = c.load()?;
            print!("{}", commands::cmd_params(&cfg)?);
        }
        Command::Stats { manifest, out } => {
            let dir = out.unwrap_or_else(|| manifest.parent().map(PathBuf::from).unwrap_or_default());
            let report = commands::cmd_stats(&manifest, &dir)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("omreid: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
