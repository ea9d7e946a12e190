use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::Args;
use odssd_core::synth::{generate_scene, train_toy, EpochStats, Optimizer, Scene, TrainConfig};

use crate::data::synth_spec;
use crate::manifest::{self, RunManifest};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const LOSS_FILE: &str = "loss_curve.tsv";

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    /// Scene generator seed.
    #[arg(long, default_value_t = 11)]
    pub scene_seed: u64,
    /// Vertical misalignment of the training pairs, +-px.
    #[arg(long, default_value_t = 0)]
    pub dy_jitter: i32,
    /// Weight init and shuffle seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Model key=value override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl TrainArgs {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::toy();
        for o in &self.overrides {
            c.model.apply_kv(o).map_err(anyhow::Error::msg)?;
        }
        c.model.validate().map_err(anyhow::Error::msg)?;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            // milestones keep their relative position
            c.lr_milestones = c.lr_milestones.iter().map(|m| m * v / c.epochs.max(1)).collect();
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        match self.optimizer.as_deref() {
            None => {}
            Some("adam") => {
                c.optimizer = Optimizer::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                }
            }
            Some("sgd") => c.optimizer = Optimizer::Sgd { momentum: 0.9 },
            Some(other) => bail!("unknown optimizer {other:?}"),
        }
        Ok(c)
    }
}

pub fn loss_curve_text(initial: f64, epochs: &[EpochStats]) -> String {
    let mut s = String::from("epoch\tloss\tclassification\tregression\tgrad_norm\tlearning_rate\n");
    writeln!(s, "init\t{initial}\t\t\t\t").unwrap();
    for e in epochs {
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.epoch, e.loss, e.classification, e.regression, e.grad_norm, e.learning_rate
        )
        .unwrap();
    }
    s
}

pub fn train(a: &TrainArgs, args: &[String]) -> Result<()> {
    let start = Instant::now();
    let config = a.train_config()?;
    let spec = synth_spec(a.scene_seed, a.dy_jitter)?;
    let scenes: Vec<Scene> = (0..a.scenes as u64).map(|i| generate_scene(&spec, i)).collect();
    let mut m = RunManifest::new("train-toy", args);
    m.config = format!("{}# {:?}\n# {:?}\n", config.model.to_kv(), config.optimizer, spec);
    m.time("scenes", start.elapsed());
    let out = train_toy(&config, &scenes, |e| {
        eprintln!("epoch {:>3} loss {:.4} lr {:.2e}", e.epoch, e.loss, e.learning_rate)
    })?;
    m.time("training", out.elapsed);
    if let Some(reason) = &out.aborted {
        m.notes.push(format!("aborted: {reason}"));
    }
    std::fs::create_dir_all(&a.out)?;
    let weights = a.out.join(WEIGHTS_FILE);
    let curve = a.out.join(LOSS_FILE);
    std::fs::write(&weights, &out.checkpoint)?;
    std::fs::write(&curve, loss_curve_text(out.initial_loss, &out.epochs))?;
    m.outputs = vec![weights, curve];
    m.time("total", start.elapsed());
    m.write(&a.out.join(manifest::FILE_NAME))
}
