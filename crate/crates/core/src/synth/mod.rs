//! Deterministic synthetic stereo scenes and the desk-scale trainer.
//!
//! A scene is sampled as a [`SceneLayout`] (background seed, per-scene
//! vertical offset, and objects with integer boxes and disparities), then
//! rendered. Objects are drawn in the left view at their sampled box and in
//! the right view translated by `(-dx, -dy)`. The background sits at zero
//! horizontal disparity and shares the scene's vertical offset.

mod train;

pub use train::{
    image_to_tensor, predict, shift_object_test, train_toy, EpochStats, Optimizer, ShiftResult, TrainConfig,
    TrainError, TrainOutcome,
};

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotation::{
    stack_pair, write_annotation, AnnotatedObject, AnnotationDoc, AnnotationError, DatasetIndex, IndexEntry,
    SourceSystem,
};
use crate::geometry::{BBox, ObjectDisparity, StereoObject};

const MAX_DY_JITTER: i32 = 16;
const PLACEMENT_RETRIES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Rendered as a textured rectangle, labelled `car`.
    Rectangle,
    /// Rendered as a textured ellipse, labelled `trafficsign`.
    Ellipse,
}

impl Shape {
    pub fn label(self) -> &'static str {
        match self {
            Shape::Rectangle => "car",
            Shape::Ellipse => "trafficsign",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub view_width: u32,
    pub view_height: u32,
    /// Inclusive object count range.
    pub objects: (usize, usize),
    /// Inclusive horizontal disparity range, pixels.
    pub disparity: (i32, i32),
    /// Per-scene vertical offset drawn from `[-dy_jitter, dy_jitter]`.
    pub dy_jitter: i32,
    /// Inclusive object width and height ranges, pixels.
    pub object_width: (u32, u32),
    pub object_height: (u32, u32),
    pub shapes: Vec<Shape>,
    /// Amplitude of the background noise, 0..=255.
    pub background_texture: u8,
}

impl SceneSpec {
    /// Toy-scale scenes: 160x80 views, two to four objects.
    pub fn toy(seed: u64) -> Self {
        SceneSpec {
            seed,
            view_width: 160,
            view_height: 80,
            objects: (2, 4),
            disparity: (0, 40),
            dy_jitter: 0,
            object_width: (24, 56),
            object_height: (18, 40),
            shapes: vec![Shape::Rectangle, Shape::Ellipse],
            background_texture: 40,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.disparity;
        if lo < 0 || lo > hi || hi as u32 > self.view_width / 4 {
            return Err(format!("disparity range {lo}..={hi} outside [0, view_w/4]"));
        }
        if !(0..=MAX_DY_JITTER).contains(&self.dy_jitter) {
            return Err(format!("dy jitter {} outside ±{MAX_DY_JITTER}", self.dy_jitter));
        }
        if self.objects.0 > self.objects.1 || self.shapes.is_empty() {
            return Err("empty object count range or shape palette".into());
        }
        let fits = |r: (u32, u32), size: u32| r.0 >= 2 && r.0 <= r.1 && r.1 <= size;
        if !fits(self.object_width, self.view_width) || !fits(self.object_height, self.view_height) {
            return Err("object size range does not fit the view".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub shape: Shape,
    /// Left-view box, integer corners.
    pub left: BBox,
    pub dx: i32,
    pub dy: i32,
    pub color: [u8; 3],
    pub texture_seed: u64,
}

impl PlacedObject {
    pub fn right(&self) -> BBox {
        self.left.translate(-self.dx as f64, -self.dy as f64)
    }

    pub fn stereo(&self) -> StereoObject {
        StereoObject {
            label: self.shape.label().to_string(),
            left_box: self.left,
            right_box: self.right(),
            disparity: ObjectDisparity::new(self.dx as f64, self.dy as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub view_width: u32,
    pub view_height: u32,
    pub background_seed: u64,
    pub background_texture: u8,
    pub dy: i32,
    pub objects: Vec<PlacedObject>,
    /// Objects dropped because no placement was found.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub layout: SceneLayout,
    pub left: RgbImage,
    pub right: RgbImage,
}

impl Scene {
    pub fn objects(&self) -> Vec<StereoObject> {
        self.layout.objects.iter().map(PlacedObject::stereo).collect()
    }

    pub fn stacked(&self) -> RgbImage {
        stack_pair(&self.left, &self.right).expect("views share a size")
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn overlaps(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.xmin < b.xmax + margin && b.xmin < a.xmax + margin && a.ymin < b.ymax + margin && b.ymin < a.ymax + margin
}

/// Samples the layout of scene `index`.
pub fn sample_layout(spec: &SceneSpec, index: u64) -> SceneLayout {
    let mut rng = scene_rng(spec.seed, index);
    let (vw, vh) = (spec.view_width as i32, spec.view_height as i32);
    let dy = rng.random_range(-spec.dy_jitter..=spec.dy_jitter);
    let count = rng.random_range(spec.objects.0..=spec.objects.1);
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(count);
    let mut skipped = 0;
    for _ in 0..count {
        let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
        // channels kept away from the mid-grey background
        let color = [(); 3].map(|_| {
            let c: u8 = rng.random();
            if c < 128 {
                c / 3
            } else {
                255 - (255 - c) / 3
            }
        });
        let texture_seed = rng.random();
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let w = rng.random_range(spec.object_width.0..=spec.object_width.1) as i32;
            let h = rng.random_range(spec.object_height.0..=spec.object_height.1) as i32;
            let dx = rng.random_range(spec.disparity.0..=spec.disparity.1);
            // the right-view copy at x - dx must stay inside the view
            if dx + w > vw {
                continue;
            }
            let x = rng.random_range(dx..=vw - w);
            let y_lo = dy.max(0);
            let y_hi = (vh - h).min(vh - h + dy);
            if y_lo > y_hi {
                continue;
            }
            let y = rng.random_range(y_lo..=y_hi);
            let left = BBox {
                xmin: x as f64,
                ymin: y as f64,
                xmax: (x + w) as f64,
                ymax: (y + h) as f64,
            };
            let cand = PlacedObject {
                shape,
                left,
                dx,
                dy,
                color,
                texture_seed,
            };
            let clash = objects
                .iter()
                .any(|o| overlaps(&o.left, &cand.left, 2.0) || overlaps(&o.right(), &cand.right(), 2.0));
            if !clash {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => skipped += 1,
        }
    }
    SceneLayout {
        view_width: spec.view_width,
        view_height: spec.view_height,
        background_seed: rng.random(),
        background_texture: spec.background_texture,
        dy,
        objects,
        skipped,
    }
}

/// Cheap integer hash for procedural textures.
fn hash3(seed: u64, x: i64, y: i64) -> u64 {
    let mut h = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 31;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 29;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 32)
}

fn background(layout: &SceneLayout, x: i64, y: i64) -> Rgb<u8> {
    let amp = layout.background_texture as i64;
    // 4x4 blocks of noise over a mid-grey
    let n = |c: u64| {
        let v = hash3(layout.background_seed.wrapping_add(c), x.div_euclid(4), y.div_euclid(4)) % (2 * amp as u64 + 1);
        (110 + v as i64 - amp).clamp(0, 255) as u8
    };
    Rgb([n(0), n(1), n(2)])
}

fn object_pixel(o: &PlacedObject, u: i64, v: i64) -> Option<Rgb<u8>> {
    let w = (o.left.xmax - o.left.xmin) as i64;
    let h = (o.left.ymax - o.left.ymin) as i64;
    if let Shape::Ellipse = o.shape {
        let (a, b) = (w as f64 / 2.0, h as f64 / 2.0);
        let (px, py) = (u as f64 + 0.5 - a, v as f64 + 0.5 - b);
        let r = ((px / a).powi(2) + (py / b).powi(2)).sqrt();
        if r > 1.0 {
            return None;
        }
        let edge = (1.0 - r) * a.min(b);
        if edge < 1.5 {
            return Some(Rgb([20, 20, 20]));
        }
        // sign-like pale rim inside the outline
        if edge < 4.0 {
            return Some(Rgb([235, 235, 235]));
        }
    }
    if u == 0 || v == 0 || u == w - 1 || v == h - 1 {
        return Some(Rgb([20, 20, 20]));
    }
    let noise = (hash3(o.texture_seed, u.div_euclid(3), v.div_euclid(3)) % 41) as i32 - 20;
    Some(Rgb(o.color.map(|c| (c as i32 + noise).clamp(0, 255) as u8)))
}

fn render_view(layout: &SceneLayout, right: bool) -> RgbImage {
    let (w, h) = (layout.view_width, layout.view_height);
    let shift_y = if right { layout.dy as i64 } else { 0 };
    let mut img = RgbImage::from_fn(w, h, |x, y| background(layout, x as i64, y as i64 + shift_y));
    // far objects first so nearer ones (larger dx) end up on top
    let mut order: Vec<&PlacedObject> = layout.objects.iter().collect();
    order.sort_by_key(|o| o.dx);
    for o in order {
        let b = if right { o.right() } else { o.left };
        let (x0, y0) = (b.xmin as i64, b.ymin as i64);
        for y in y0.max(0)..(b.ymax as i64).min(h as i64) {
            for x in x0.max(0)..(b.xmax as i64).min(w as i64) {
                if let Some(p) = object_pixel(o, x - x0, y - y0) {
                    img.put_pixel(x as u32, y as u32, p);
                }
            }
        }
    }
    img
}

pub fn render(layout: &SceneLayout) -> Scene {
    Scene {
        layout: layout.clone(),
        left: render_view(layout, false),
        right: render_view(layout, true),
    }
}

/// Scene `index` of `spec`; identical for identical arguments.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Scene {
    render(&sample_layout(spec, index))
}

/// The same layout with one object's horizontal disparity increased by
/// `shift`; only the right view changes.
pub fn shifted_layout(layout: &SceneLayout, object: usize, shift: i32) -> SceneLayout {
    let mut l = layout.clone();
    l.objects[object].dx += shift;
    l
}

/// Annotation document for a scene, in the stacked frame.
pub fn scene_annotation(scene: &Scene, filename: &str) -> AnnotationDoc {
    let mut doc = AnnotationDoc::new(filename, scene.layout.view_width, scene.layout.view_height);
    doc.folder = "synth".into();
    doc.database = "synth".into();
    doc.objects = scene
        .objects()
        .iter()
        .map(|o| AnnotatedObject::from_stereo(o, scene.layout.view_height as f64))
        .collect();
    doc
}

/// Writes `count` scenes as stacked PNGs plus XML and an `index.tsv`.
pub fn write_dataset(spec: &SceneSpec, count: usize, dir: &Path) -> Result<DatasetIndex, AnnotationError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(spec, i as u64);
        let stem = format!("synth_{:06}", i);
        let image = dir.join(format!("{stem}.png"));
        let annotation = dir.join(format!("{stem}.xml"));
        scene
            .stacked()
            .save(&image)
            .map_err(|e| AnnotationError::Io(std::io::Error::other(e)))?;
        let doc = scene_annotation(&scene, &format!("{stem}.png"));
        std::fs::write(&annotation, write_annotation(&doc)?)?;
        entries.push(IndexEntry {
            image,
            annotation,
            source: SourceSystem::Synth,
        });
    }
    let index = DatasetIndex { entries };
    std::fs::write(dir.join("index.tsv"), index.to_text(dir))?;
    Ok(index)
}
