//! Subcommands of the `odssd` tool. `main` only parses arguments and calls
//! [`run`], so tests drive the same code paths in-process.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use odssd_core::model::ModelConfig;

pub mod bench;
pub mod data;
pub mod infer;
pub mod manifest;
pub mod serve;
pub mod train;

pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "odssd", version, about = "Stereo object detection with per-object disparity")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stack matching left/right images into one image per pair.
    Stack(data::StackArgs),
    /// Write a synthetic stereo dataset.
    Synth(data::SynthArgs),
    /// Run a trained model over a dataset index.
    Infer(infer::InferArgs),
    /// Score detection records against annotations.
    Eval(infer::EvalArgs),
    /// Time inference with and without suppression.
    Bench(bench::BenchArgs),
    /// Train the reduced model on synthetic scenes.
    TrainToy(train::TrainArgs),
    /// Serve a dataset to the annotation UI.
    Serve(serve::ServeArgs),
    /// Print a configuration as key=value lines.
    Config(ConfigArgs),
    /// Repeat the run recorded in a manifest.
    Replay { manifest: PathBuf },
}

/// Model configuration: a preset, then an optional file, then `--set` pairs.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// toy, 640 or 320.
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// File of key=value lines applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single key=value override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut c = preset(&self.preset)?;
        self.apply(&mut c)?;
        Ok(c)
    }

    /// Applies the file and `--set` pairs over `c`.
    pub fn apply(&self, c: &mut ModelConfig) -> Result<()> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            c.apply_kv(&text).map_err(anyhow::Error::msg)?;
        }
        for o in &self.overrides {
            c.apply_kv(o).map_err(anyhow::Error::msg)?;
        }
        c.validate().map_err(anyhow::Error::msg)
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    Ok(match name {
        "toy" => ModelConfig::toy(),
        "640" => ModelConfig::od_ssd_640(),
        "320" => ModelConfig::od_ssd_320(),
        other => bail!("unknown preset {other:?} (expected toy, 640 or 320)"),
    })
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also write config.kv and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn config_cmd(a: &ConfigArgs, args: &[String]) -> Result<()> {
    let kv = a.model.resolve()?.to_kv();
    print!("{kv}");
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.kv");
        std::fs::write(&path, &kv)?;
        let mut m = RunManifest::new("config", args);
        m.config = kv;
        m.outputs.push(path);
        m.write(&dir.join(manifest::FILE_NAME))?;
    }
    Ok(())
}

/// Runs one invocation; `args` excludes the binary name.
pub fn run(args: &[String]) -> Result<()> {
    let argv = std::iter::once("odssd".to_string()).chain(args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| anyhow::anyhow!("{e}"))?;
    match &cli.command {
        Command::Stack(a) => data::stack(a, args),
        Command::Synth(a) => data::synth(a, args),
        Command::Infer(a) => infer::infer(a, args),
        Command::Eval(a) => infer::eval(a, args),
        Command::Bench(a) => bench::bench(a, args).map(|_| ()),
        Command::TrainToy(a) => train::train(a, args),
        Command::Serve(a) => serve::serve(a, args),
        Command::Config(a) => config_cmd(a, args),
        Command::Replay { manifest } => {
            let m = RunManifest::read(manifest)?;
            if m.command == "replay" {
                bail!("refusing to replay a replay");
            }
            run(&m.args)
        }
    }
}
