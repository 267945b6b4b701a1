use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use egl_core::harness::{AblationAxis, ExperimentConfig, Harness};
use egl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "egl", about = "Attention grounding experiments on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of key=value lines; defaults apply to every key not given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test scenes.
    GenData,
    /// Pretrain encoders and train the default model for every seed.
    Train,
    /// Point accuracy, AP and AR against the random-point baseline.
    EvalInstseg,
    /// Mask IoU, grounding recall and caption overlap.
    EvalGcg,
    /// Compare arms along one axis.
    Ablate {
        /// attn_norm, prompt_mode, encoder_variant, noise_step, tap_block or per_head.
        #[arg(long)]
        axis: Option<String>,
    },
    /// Draw masks, prompt points and labels from grounding dumps.
    Overlay {
        /// Test scene ids; repeatable.
        #[arg(long = "scene")]
        scenes: Vec<u64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        config.set("seeds", &s.to_string())?;
    }
    if let Command::Overlay { scenes } = &cli.command {
        if !scenes.is_empty() {
            let ids: Vec<String> = scenes.iter().map(u64::to_string).collect();
            config.set("overlay.scenes", &ids.join(","))?;
        }
    }
    let axis: AblationAxis = match &cli.command {
        Command::Ablate { axis: Some(a) } => a.parse()?,
        _ => config.get("ablate.axis")?,
    };
    let h = Harness::new(config, cli.common.out, cli.common.force);
    let report = match cli.command {
        Command::GenData => h.cmd_gen_data()?,
        Command::Train => h.cmd_train()?,
        Command::EvalInstseg => h.cmd_eval_instseg()?,
        Command::EvalGcg => h.cmd_eval_gcg()?,
        Command::Ablate { .. } => h.cmd_ablate(axis)?,
        Command::Overlay { .. } => h.cmd_overlay()?,
    };
    println!("{:#}", report.metrics);
    log::info!("{} finished in {:.1}s", report.command, report.wall_clock_s);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
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

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
