//! Inference over a dataset index and evaluation of the resulting records.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use image::imageops::FilterType;
use image::RgbImage;
use odssd_core::annotation::{doc_to_targets, parse_annotation, stack_pair, unstack, DatasetIndex};
use odssd_core::eval::{evaluate, read_disparity_gt, EvalConfig, EvalSample};
use odssd_core::model::{generate_priors, load_weights, Model, ModelConfig, Prior};
use odssd_core::postprocess::{detect, read_records, write_records, Detection, DetectionRecord};
use odssd_core::synth::image_to_tensor;

use crate::manifest::{self, RunManifest};

pub const DETECTIONS_FILE: &str = "detections.tsv";

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Postprocessing override (score_threshold, nms_iou_threshold, top_k); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

const POSTPROCESS_KEYS: [&str; 3] = ["score_threshold", "nms_iou_threshold", "top_k"];

/// Applies `overrides` to a loaded model's config; anything that would change
/// the network or its priors is refused.
pub fn postprocess_config(base: &ModelConfig, overrides: &[String]) -> Result<ModelConfig> {
    let mut c = base.clone();
    for o in overrides {
        let key = o.split_once('=').map_or(o.as_str(), |(k, _)| k.trim());
        if !POSTPROCESS_KEYS.contains(&key) {
            bail!(
                "{key:?} cannot be changed at inference (allowed: {})",
                POSTPROCESS_KEYS.join(", ")
            );
        }
        c.apply_kv(o).map_err(anyhow::Error::msg)?;
    }
    c.validate().map_err(anyhow::Error::msg)?;
    Ok(c)
}

/// Resizes each view of `stacked` to the model's view size. Returns the
/// model-sized image and the (x, y) factors back to the original views.
pub fn fit_to_model(stacked: RgbImage, config: &ModelConfig) -> Result<(RgbImage, f64, f64)> {
    let (vw, vh) = (config.view_width as u32, config.view_height as u32);
    let (w, h) = stacked.dimensions();
    if (w, h) == (vw, 2 * vh) {
        return Ok((stacked, 1.0, 1.0));
    }
    let (l, r) = unstack(&stacked)?;
    let l = image::imageops::resize(&l, vw, vh, FilterType::Triangle);
    let r = image::imageops::resize(&r, vw, vh, FilterType::Triangle);
    Ok((stack_pair(&l, &r)?, w as f64 / vw as f64, (h / 2) as f64 / vh as f64))
}

/// Forward pass and postprocessing for one stacked image, in the image's own
/// view coordinates.
pub fn detect_image(
    model: &Model<f32>,
    priors: &[Prior],
    config: &ModelConfig,
    stacked: RgbImage,
) -> Result<Vec<Detection>> {
    let (img, sx, sy) = fit_to_model(stacked, config)?;
    let (conf, loc) = model.forward(&image_to_tensor(&[&img]))?;
    let mut dets = detect(&conf, &loc, priors, config)?.remove(0);
    if (sx, sy) != (1.0, 1.0) {
        for d in &mut dets {
            d.left_box = d.left_box.scale(sx, sy);
            d.dx *= sx;
            d.dy *= sy;
        }
    }
    Ok(dets)
}

pub fn infer(a: &InferArgs, args: &[String]) -> Result<()> {
    let start = Instant::now();
    let bytes = std::fs::read(&a.weights).with_context(|| format!("reading {}", a.weights.display()))?;
    let (model, _) = load_weights::<f32>(&bytes)?;
    let config = postprocess_config(model.config(), &a.overrides)?;
    let priors = generate_priors(&config);
    let index = DatasetIndex::load_images(&a.index)?;
    let mut m = RunManifest::new("infer", args);
    m.config = config.to_kv();
    m.inputs = vec![a.weights.clone(), a.index.clone()];
    m.time("load", start.elapsed());

    let mut records = Vec::new();
    for e in &index.entries {
        let img = match image::open(&e.image) {
            Ok(i) => i.to_rgb8(),
            Err(err) => {
                let note = format!("skipped {}: {err}", e.image.display());
                eprintln!("{note}");
                m.notes.push(note);
                continue;
            }
        };
        let t = Instant::now();
        let dets = detect_image(&model, &priors, &config, img)?;
        m.time("inference", t.elapsed());
        records.extend(dets.into_iter().map(|d| DetectionRecord {
            image_id: e.id(),
            class_name: config.class_names[d.class_id].clone(),
            detection: d,
        }));
    }
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join(DETECTIONS_FILE);
    std::fs::write(&path, write_records(&records))?;
    m.outputs.push(path);
    m.time("total", start.elapsed());
    m.write(&a.out.join(manifest::FILE_NAME))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// Directory of 16-bit disparity PNGs named `<image id>.png`.
    #[arg(long)]
    pub gt_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn dense_map(dir: &Path, id: &str) -> Result<Option<odssd_core::eval::DisparityMap>> {
    let p = dir.join(format!("{id}.png"));
    if !p.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&p)?;
    Ok(Some(
        read_disparity_gt(&bytes).with_context(|| format!("decoding {}", p.display()))?,
    ))
}

pub fn eval(a: &EvalArgs, args: &[String]) -> Result<()> {
    let start = Instant::now();
    let index = DatasetIndex::load(&a.index)?;
    let config = EvalConfig {
        iou_threshold: a.iou,
        ..Default::default()
    };
    let mut class_config = ModelConfig::toy();
    class_config.class_names = config.class_names.clone();
    let text = std::fs::read_to_string(&a.detections)?;
    let records = read_records(&text, &class_config).map_err(anyhow::Error::msg)?;
    let mut by_image: HashMap<String, Vec<Detection>> = HashMap::new();
    for r in records {
        by_image.entry(r.image_id).or_default().push(r.detection);
    }
    let mut samples = Vec::with_capacity(index.entries.len());
    for e in &index.entries {
        let id = e.id();
        let xml = std::fs::read(&e.annotation)?;
        let doc = parse_annotation(&xml).with_context(|| format!("parsing {}", e.annotation.display()))?;
        let ground_truth = doc_to_targets(&doc)?.into_iter().map(|g| g.object).collect();
        let dense = match &a.gt_dir {
            Some(dir) => dense_map(dir, &id)?,
            None => None,
        };
        samples.push(EvalSample {
            detections: by_image.remove(&id).unwrap_or_default(),
            image_id: id,
            ground_truth,
            dense,
        });
    }
    let mut m = RunManifest::new("eval", args);
    for id in by_image.keys() {
        m.notes.push(format!("detections for {id} have no index entry"));
    }
    let report = evaluate(&samples, &config);
    std::fs::create_dir_all(&a.out)?;
    let text_path = a.out.join("report.txt");
    let kv_path = a.out.join("report.kv");
    std::fs::write(&text_path, report.to_text())?;
    std::fs::write(&kv_path, report.to_kv())?;
    m.config = format!("iou_threshold={}\n", a.iou);
    m.inputs = vec![a.index.clone(), a.detections.clone()];
    m.inputs.extend(a.gt_dir.clone());
    m.outputs = vec![text_path, kv_path];
    m.time("total", start.elapsed());
    m.write(&a.out.join(manifest::FILE_NAME))
}
