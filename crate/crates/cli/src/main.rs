//! `plovis`: train a point-cloud segmentation head from 2D pseudo labels.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{ProviderKind, RunConfig};

/// A configuration or usage problem; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "plovis", version, about = "Open-vocabulary point cloud segmentation from rendered 2D pseudo labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set w=0.3` or `--set oracle_noise.flip_prob=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (default: $PLOVIS_OUT/<command>, else runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    provider: Option<ProviderKind>,
    #[arg(long)]
    sidecar_cmd: Option<String>,
    #[arg(long)]
    sidecar_addr: Option<String>,
    /// Replay recorded provider responses from this directory.
    #[arg(long)]
    replay_dir: Option<PathBuf>,
    /// Record provider responses into this directory.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Directory of `.ply` scenes (synthetic scenes when omitted).
    #[arg(long)]
    scene_dir: Option<PathBuf>,
    #[arg(long)]
    label_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a head and write checkpoints, reports, and renders.
    Train(Common),
    /// Evaluate a checkpoint on densely labeled scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render one scene from a random top corner.
    Render {
        #[command(flatten)]
        common: Common,
        /// A `.ply` file; a synthetic scene is used when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Synthetic scene index.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Train and evaluate once per value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Write synthetic scenes as `.ply` files with dense `.labels`.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref(), &self.sets).map_err(|e| Usage(format!("{e:#}")))?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(p) = self.provider {
            cfg.provider = p;
        }
        if self.sidecar_cmd.is_some() {
            cfg.sidecar_cmd = self.sidecar_cmd.clone();
        }
        if self.sidecar_addr.is_some() {
            cfg.sidecar_addr = self.sidecar_addr.clone();
        }
        if self.replay_dir.is_some() {
            cfg.replay_dir = self.replay_dir.clone();
        }
        if self.record.is_some() {
            cfg.record_dir = self.record.clone();
        }
        if self.scene_dir.is_some() {
            cfg.scene_dir = self.scene_dir.clone();
        }
        if self.label_dir.is_some() {
            cfg.label_dir = self.label_dir.clone();
        }
        cfg.check().map_err(|e| Usage(format!("{e:#}")))?;
        Ok(cfg)
    }

    fn out(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os("PLOVIS_OUT")
                .map_or_else(|| Path::new("runs").to_path_buf(), PathBuf::from)
                .join(command)
        })
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let out = common.out("train");
            let outcome = commands::run_train(&cfg, &out)?;
            println!("trained {} steps; artifacts in {}", outcome.state.step, out.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            if !checkpoint.is_file() {
                return Err(Usage(format!("checkpoint not found: {}", checkpoint.display())).into());
            }
            let out = common.out("eval");
            let m = commands::run_eval(&cfg, &checkpoint, &out)?;
            println!("mIoU {:.4}  mAcc {:.4}", m.miou, m.macc);
        }
        Command::Render { common, scene, index } => {
            let cfg = common.resolve()?;
            if let Some(p) = &scene {
                if !p.is_file() {
                    return Err(Usage(format!("scene not found: {}", p.display())).into());
                }
            }
            let out = common.out("render");
            let r = commands::run_render(&cfg, scene.as_deref(), index, &out)?;
            println!("{} of {} points visible; written to {}", r.survivors, r.projected.len(), out.display());
        }
        Command::Sweep { common, param, values } => {
            let cfg = common.resolve()?;
            let summary = commands::run_sweep(&cfg, &param, &values, &common.out("sweep"))?;
            print!("{summary}");
        }
        Command::GenSynthetic { common, count } => {
            let cfg = common.resolve()?;
            let out = common.out("synthetic");
            commands::run_gen_synthetic(&cfg, count, &out)?;
            println!("wrote {count} scenes to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
