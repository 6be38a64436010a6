//! `spcg`: runs structure-preserving Cycle-GAN experiments from presets and
//! TOML configs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sp_cyclegan::experiment::{preset_names, preset_source, ExperimentConfig, Overrides, Pipeline, Stage};
use sp_cyclegan::synth::generate_synthetic_domains;
use sp_cyclegan::{Error, ErrorCategory};

#[derive(Parser)]
#[command(name = "spcg", version, about = "Structure-preserving Cycle-GAN domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural two-domain dataset described by the config.
    Synth(Common),
    /// Run one pipeline stage, or all of them.
    Run {
        #[command(flatten)]
        common: Common,
        /// train_da, translate, train_seg, eval or all.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// List presets, or print one as TOML.
    Presets { name: Option<String> },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). May name a base preset with `preset = "..."`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration to start from.
    #[arg(long)]
    preset: Option<String>,
    /// Seed for model initialization, both training stages and synthetic data.
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long)]
    deterministic: bool,
    /// Output directory (overrides the config).
    #[arg(long)]
    output: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let cfg = ExperimentConfig::resolve(
            self.preset.as_deref(),
            self.config.as_deref(),
            std::env::vars(),
            &Overrides {
                seed: self.seed,
                output: self.output.clone(),
                deterministic: self.deterministic,
            },
        )?;
        if cfg.deterministic {
            single_threaded();
        }
        Ok(cfg)
    }
}

/// Pins every compute pool to one thread. Must run before the first tensor op.
fn single_threaded() {
    // Single-threaded at this point: nothing else reads the environment yet.
    std::env::set_var("RAYON_NUM_THREADS", "1");
    if rayon::ThreadPoolBuilder::new().num_threads(1).build_global().is_err() {
        log::warn!("global thread pool already initialized");
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = common.resolve()?;
            let spec = cfg
                .synth
                .as_ref()
                .ok_or_else(|| Error::Config("config has no [synth] section".into()))?;
            let manifest = generate_synthetic_domains(spec, &cfg.output.join("data"))?;
            println!("{}", manifest.display());
        }
        Command::Run { common, stage } => {
            let stage: Stage = stage.parse()?;
            let cfg = common.resolve()?;
            let pipeline = Pipeline::new(cfg)?;
            let report = pipeline.run(stage)?;
            if let Some(cmp) = report.comparison {
                print!("{}", cmp.to_text());
            }
        }
        Command::Presets { name: None } => {
            for name in preset_names() {
                println!("{name}");
            }
        }
        Command::Presets { name: Some(name) } => print!("{}", preset_source(&name)?),
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Training => 4,
        ErrorCategory::Other => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
