//! Inference timing in ms/frame, with and without postprocessing.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::Args;
use odssd_core::model::{build_model, closed_form_param_count, generate_priors, load_weights, Model};
use odssd_core::postprocess::detect;
use odssd_core::Tensor;

use crate::manifest::{self, RunManifest};

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Trained weights; without them a seeded random model is timed.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Presets to time when no weights are given.
    #[arg(long, value_delimiter = ',', default_value = "640,320")]
    pub presets: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub size_mb: f64,
    pub inference_ms: f64,
    /// Same iterations with suppression time added.
    pub inference_nms_ms: f64,
    pub iterations: usize,
}

/// Times `iterations` frames after `warmup` untimed ones. Each frame's
/// postprocessing time is added to its own forward time, so the second
/// column can never undercut the first.
pub fn time_model(model: &Model<f32>, iterations: usize, warmup: usize) -> Result<(f64, f64)> {
    let config = model.config();
    let priors = generate_priors(config);
    let shape = model.input_shape(1);
    let input = Tensor::<f32>::from_fn(&shape, |i| ((i * 2654435761) % 1000) as f32 / 500.0 - 1.0);
    let mut forward = Duration::ZERO;
    let mut post = Duration::ZERO;
    for i in 0..warmup + iterations {
        let t = Instant::now();
        let (conf, loc) = model.forward(&input)?;
        let tf = t.elapsed();
        let t = Instant::now();
        let dets = detect(&conf, &loc, &priors, config)?;
        let tp = t.elapsed();
        std::hint::black_box(dets);
        if i >= warmup {
            forward += tf;
            post += tp;
        }
    }
    let n = iterations.max(1) as f64;
    let ms = |d: Duration| d.as_secs_f64() * 1e3 / n;
    Ok((ms(forward), ms(forward + post)))
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = String::from("Config\tmodel precision size\tInference only\tInference + NMS\n");
    for r in rows {
        writeln!(
            s,
            "{}\tFP32 {:.2}MB\t{:.1} ms/frame\t{:.1} ms/frame",
            r.label, r.size_mb, r.inference_ms, r.inference_nms_ms
        )
        .unwrap();
    }
    s
}

pub fn bench(a: &BenchArgs, args: &[String]) -> Result<Vec<BenchRow>> {
    let start = Instant::now();
    let mut models: Vec<Model<f32>> = Vec::new();
    let mut m = RunManifest::new("bench", args);
    match &a.weights {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            models.push(load_weights(&bytes)?.0);
            m.inputs.push(p.clone());
        }
        None => {
            for name in &a.presets {
                models.push(build_model(&crate::preset(name)?, 0)?);
            }
        }
    }
    let mut rows = Vec::new();
    for model in &models {
        let c = model.config();
        let (h, w) = c.input_hw();
        let (inference_ms, inference_nms_ms) = time_model(model, a.iterations, a.warmup)?;
        rows.push(BenchRow {
            label: format!("{w}x{h}"),
            size_mb: closed_form_param_count(c).1 as f64 / 1e6,
            inference_ms,
            inference_nms_ms,
            iterations: a.iterations,
        });
        m.config.push_str(&c.to_kv());
        m.config.push('\n');
    }
    let table = format_table(&rows);
    print!("{table}");
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("bench.tsv");
    std::fs::write(&path, &table)?;
    m.outputs.push(path);
    m.notes.push(format!("iterations={} warmup={}", a.iterations, a.warmup));
    m.time("total", start.elapsed());
    m.write(&a.out.join(manifest::FILE_NAME))?;
    Ok(rows)
}
