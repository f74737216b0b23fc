use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pathotune::config::{parse_config, ExperimentConfig, ModeName};
use pathotune::experiment::{error_record, run_experiment, Command};
use pathotune::Result;

#[derive(Parser)]
#[command(name = "pathotune", version, about = "Multi-modal prompt tuning of a frozen ViT on synthetic pathology data")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset (images, manifest.csv, spec.json) to the output directory
    GenerateData(Common),
    /// Train one model and evaluate it on the held-out split
    Train(Common),
    /// Evaluate a saved checkpoint on the held-out split
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load; defaults to <out>/checkpoint.json
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the tuning-mode and prompt ablation grid
    Ablate(Common),
    /// Sweep prompt counts (N, T, M)
    Sweep(Common),
    /// Print total and trainable parameter counts
    CountParams(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Args)]
struct Common {
    /// TOML config, or a run.json from an earlier run
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed (overrides train.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides output.dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tuning mode: LP, FT or pathotune
    #[arg(long)]
    mode: Option<ModeName>,
    #[arg(long, value_enum)]
    tvp: Option<Switch>,
    #[arg(long, value_enum)]
    ttp: Option<Switch>,
    #[arg(long, value_enum)]
    ivp: Option<Switch>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(mode) = self.mode {
            cfg.train.mode = mode;
        }
        for (flag, slot) in [
            (self.tvp, &mut cfg.train.tvp),
            (self.ttp, &mut cfg.train.ttp),
            (self.ivp, &mut cfg.train.ivp),
        ] {
            if let Some(s) = flag {
                *slot = s.on();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fail(err: &pathotune::Error, out: Option<&Path>) -> ExitCode {
    let record = error_record(err);
    let text = serde_json::to_string(&record).unwrap_or_else(|_| err.to_string());
    eprintln!("{text}");
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), text + "\n");
        }
    }
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, command, checkpoint) = match &cli.command {
        Cmd::GenerateData(c) => (c, Command::GenerateData, None),
        Cmd::Train(c) => (c, Command::Train, None),
        Cmd::Evaluate { common, checkpoint } => (common, Command::Evaluate, checkpoint.clone()),
        Cmd::Ablate(c) => (c, Command::Ablate, None),
        Cmd::Sweep(c) => (c, Command::Sweep, None),
        Cmd::CountParams(c) => (c, Command::CountParams, None),
    };
    let mut cfg = match common.resolve() {
        Ok(cfg) => cfg,
        Err(e) => return fail(&e, common.out.as_deref()),
    };
    if checkpoint.is_some() {
        cfg.output.checkpoint = checkpoint;
    }
    match run_experiment(&cfg, command) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            if outcome.complete {
                ExitCode::SUCCESS
            } else {
                eprintln!("{}", serde_json::json!({"status": "incomplete", "kind": "grid", "message": "some grid cells did not complete"}));
                ExitCode::from(3)
            }
        }
        Err(e) => fail(&e, Some(&cfg.output.dir)),
    }
}
