//! Dataset preparation: stacking captured pairs and writing synthetic sets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use odssd_core::annotation::{stack_dynamic, DatasetIndex, IndexEntry, SourceSystem};
use odssd_core::synth::{write_dataset, SceneSpec};

use crate::manifest::{self, RunManifest};

pub const INDEX_FILE: &str = "index.tsv";

#[derive(Debug, Args)]
pub struct StackArgs {
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Source system tag written to the index.
    #[arg(long, default_value = "S1")]
    pub source: String,
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = e?.path();
        let ext = path.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

/// Pairs files by name, stacks each pair left-on-top and writes PNGs plus
/// an index. Nothing is written unless every pair is usable.
pub fn stack(a: &StackArgs, args: &[String]) -> Result<()> {
    let start = Instant::now();
    let source: SourceSystem = a.source.parse().map_err(anyhow::Error::msg)?;
    let left = image_files(&a.left)?;
    let right = image_files(&a.right)?;
    let mut problems: Vec<String> = Vec::new();
    for name in left.keys().filter(|n| !right.contains_key(*n)) {
        problems.push(format!("{name}: no right image"));
    }
    for name in right.keys().filter(|n| !left.contains_key(*n)) {
        problems.push(format!("{name}: no left image"));
    }
    let mut stacked = Vec::new();
    for (name, lp) in left.iter().filter(|(n, _)| right.contains_key(*n)) {
        let open = |p: &Path| image::open(p).with_context(|| format!("decoding {}", p.display()));
        match open(lp).and_then(|l| Ok((l, open(&right[name])?))) {
            Ok((l, r)) => match stack_dynamic(&l, &r) {
                Ok(img) => stacked.push((name.clone(), img)),
                Err(e) => problems.push(format!("{name}: {e}")),
            },
            Err(e) => problems.push(format!("{name}: {e:#}")),
        }
    }
    if !problems.is_empty() {
        bail!("{} unusable pair(s):\n  {}", problems.len(), problems.join("\n  "));
    }

    std::fs::create_dir_all(&a.out)?;
    let mut index = DatasetIndex::default();
    let mut m = RunManifest::new("stack", args);
    m.inputs = vec![a.left.clone(), a.right.clone()];
    for (name, img) in &stacked {
        let stem = Path::new(name).file_stem().unwrap().to_string_lossy().into_owned();
        let image = a.out.join(format!("{stem}.png"));
        img.save(&image)
            .with_context(|| format!("writing {}", image.display()))?;
        m.outputs.push(image.clone());
        index.entries.push(IndexEntry {
            image,
            annotation: a.out.join(format!("{stem}.xml")),
            source,
        });
    }
    let index_path = a.out.join(INDEX_FILE);
    std::fs::write(&index_path, index.to_text(&a.out))?;
    m.outputs.push(index_path);
    m.time("total", start.elapsed());
    m.write(&a.out.join(manifest::FILE_NAME))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Vertical misalignment range, +-px.
    #[arg(long, default_value_t = 0)]
    pub dy_jitter: i32,
}

pub fn synth_spec(seed: u64, dy_jitter: i32) -> Result<SceneSpec> {
    let mut spec = SceneSpec::toy(seed);
    spec.dy_jitter = dy_jitter;
    spec.validate().map_err(anyhow::Error::msg)?;
    Ok(spec)
}

pub fn synth(a: &SynthArgs, args: &[String]) -> Result<()> {
    let start = Instant::now();
    let spec = synth_spec(a.seed, a.dy_jitter)?;
    let index = write_dataset(&spec, a.count, &a.out)?;
    let mut m = RunManifest::new("synth", args);
    m.config = format!("{spec:?}");
    m.outputs = index.entries.iter().map(|e| e.image.clone()).collect();
    m.outputs.push(a.out.join(INDEX_FILE));
    m.time("total", start.elapsed());
    m.write(&a.out.join(manifest::FILE_NAME))
}
