//! Stereo annotations in extended Pascal-VOC XML, stacked image pairs, and
//! the dataset index.
//!
//! A stacked image holds the left view in its top half and the right view
//! in its bottom half. In the XML, `bndbox` is the left-view box (top half)
//! and `bndbox2` is the right-view box in stacked coordinates, so its y
//! values are offset by the view height. `delta` carries the object
//! disparity.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Pixel};
use thiserror::Error;

use crate::geometry::{object_disparity, BBox, GeometryError, ObjectDisparity, StereoObject};

/// Class vocabulary, index 0 being background.
pub const CLASSES: [&str; 5] = ["background", "car", "person", "bike", "trafficsign"];

/// Disparity disagreement tolerated between stored and recomputed values.
pub const DELTA_TOLERANCE: f64 = 0.5;

pub fn class_index(name: &str) -> Option<usize> {
    CLASSES.iter().position(|&c| c == name).filter(|&i| i > 0)
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("malformed XML: {0}")]
    Xml(#[from] roxmltree::Error),
    #[error("missing element <{0}>")]
    Missing(String),
    #[error("element <{element}>: {msg}")]
    Schema { element: String, msg: String },
    #[error("invalid annotation: {0}")]
    Invariant(String),
    #[error("image size mismatch: left {left:?} vs right {right:?}")]
    ImageMismatch {
        left: (u32, u32, u8),
        right: (u32, u32, u8),
    },
    #[error("index line {line}: {msg}")]
    Index { line: usize, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
    pub depth: u32,
}

impl ImageSize {
    pub fn view_height(&self) -> u32 {
        self.height / 2
    }
}

/// Stored and recomputed disparity of an object disagree by more than
/// [`DELTA_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMismatch {
    pub object: usize,
    pub stored: ObjectDisparity,
    pub recomputed: ObjectDisparity,
}

impl std::fmt::Display for DisparityMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "object {}: stored delta ({}, {}) disagrees with boxes ({}, {})",
            self.object, self.stored.dx, self.stored.dy, self.recomputed.dx, self.recomputed.dy
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObject {
    pub name: String,
    pub pose: String,
    pub truncated: String,
    pub difficult: String,
    /// Left-view box (stacked coordinates equal view coordinates).
    pub bndbox: BBox,
    pub delta: ObjectDisparity,
    /// Right-view box in stacked coordinates.
    pub bndbox2: BBox,
    /// Unrecognised child elements, verbatim.
    pub extra: Vec<String>,
}

impl AnnotatedObject {
    /// Builds an object from a view-frame stereo object.
    pub fn from_stereo(obj: &StereoObject, view_h: f64) -> Self {
        AnnotatedObject {
            name: obj.label.clone(),
            pose: "Unspecified".into(),
            truncated: "0".into(),
            difficult: "0".into(),
            bndbox: obj.left_box,
            delta: obj.disparity,
            bndbox2: obj.right_box.translate(0.0, view_h),
            extra: vec![],
        }
    }
}

/// One extended-VOC annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationDoc {
    pub folder: String,
    pub filename: String,
    pub path: String,
    pub database: String,
    pub size: ImageSize,
    pub segmented: String,
    pub objects: Vec<AnnotatedObject>,
    /// Unrecognised top-level elements, verbatim.
    pub extra: Vec<String>,
    /// Objects whose stored delta disagrees with their boxes.
    pub warnings: Vec<DisparityMismatch>,
}

impl AnnotationDoc {
    pub fn new(filename: impl Into<String>, view_w: u32, view_h: u32) -> Self {
        AnnotationDoc {
            folder: String::new(),
            filename: filename.into(),
            path: String::new(),
            database: "Unknown".into(),
            size: ImageSize {
                width: view_w,
                height: 2 * view_h,
                depth: 3,
            },
            segmented: "0".into(),
            objects: vec![],
            extra: vec![],
            warnings: vec![],
        }
    }

    pub fn view_size(&self) -> (f64, f64) {
        (self.size.width as f64, self.size.view_height() as f64)
    }

    /// Checks size and box-placement invariants.
    pub fn validate(&self) -> Result<(), AnnotationError> {
        let s = self.size;
        if s.depth != 3 {
            return Err(AnnotationError::Invariant(format!("depth must be 3, got {}", s.depth)));
        }
        if !s.height.is_multiple_of(2) || s.width == 0 || s.height == 0 {
            return Err(AnnotationError::Invariant(format!(
                "stacked size {}x{} must be non-empty with even height",
                s.width, s.height
            )));
        }
        let (w, vh) = (s.width as f64, s.view_height() as f64);
        for (i, o) in self.objects.iter().enumerate() {
            o.bndbox.validate("bndbox")?;
            o.bndbox2.validate("bndbox2")?;
            if !o.delta.dx.is_finite() || !o.delta.dy.is_finite() {
                return Err(AnnotationError::Schema {
                    element: "delta".into(),
                    msg: format!("object {i}: non-finite disparity"),
                });
            }
            if !o.bndbox.within(w, vh) {
                return Err(AnnotationError::Schema {
                    element: "bndbox".into(),
                    msg: format!("object {i}: box must lie in the top half (0..{vh})"),
                });
            }
            let b2 = o.bndbox2;
            if b2.xmin < 0.0 || b2.xmax > w || b2.ymin < vh || b2.ymax > 2.0 * vh {
                return Err(AnnotationError::Schema {
                    element: "bndbox2".into(),
                    msg: format!("object {i}: box must lie in the bottom half ({vh}..{})", 2.0 * vh),
                });
            }
        }
        Ok(())
    }

    /// Recomputes every object's disparity from its boxes and records
    /// disagreements in `warnings`.
    pub fn refresh_warnings(&mut self) -> Result<(), AnnotationError> {
        let (w, vh) = self.view_size();
        let mut warnings = vec![];
        for (i, o) in self.objects.iter().enumerate() {
            let right = o.bndbox2.translate(0.0, -vh);
            let recomputed = object_disparity(&o.bndbox, &right, w, vh)?;
            if recomputed.max_abs_diff(&o.delta) > DELTA_TOLERANCE {
                warnings.push(DisparityMismatch {
                    object: i,
                    stored: o.delta,
                    recomputed,
                });
            }
        }
        self.warnings = warnings;
        Ok(())
    }
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.is_element() && c.tag_name().name() == name)
}

fn req_child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Result<roxmltree::Node<'a, 'i>, AnnotationError> {
    child(node, name).ok_or_else(|| AnnotationError::Missing(format!("{}/{}", node.tag_name().name(), name)))
}

fn text_of(node: roxmltree::Node) -> String {
    node.text().unwrap_or("").trim().to_string()
}

fn opt_text(node: roxmltree::Node, name: &str, default: &str) -> String {
    child(node, name).map(text_of).unwrap_or_else(|| default.to_string())
}

fn number(node: roxmltree::Node, name: &str, ctx: &str) -> Result<f64, AnnotationError> {
    let c = req_child(node, name)?;
    let t = text_of(c);
    t.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| AnnotationError::Schema {
            element: format!("{ctx}/{name}"),
            msg: format!("expected a number, got {t:?}"),
        })
}

fn parse_box(node: roxmltree::Node, ctx: &str) -> Result<BBox, AnnotationError> {
    let names: Vec<&str> = node
        .children()
        .filter(|c| c.is_element())
        .map(|c| c.tag_name().name())
        .collect();
    for key in ["xmin", "ymin", "xmax", "ymax"] {
        let n = names.iter().filter(|&&k| k == key).count();
        if n != 1 {
            return Err(AnnotationError::Schema {
                element: format!("{ctx}/{key}"),
                msg: format!("expected exactly one <{key}>, found {n}"),
            });
        }
    }
    if let Some(other) = names.iter().find(|k| !["xmin", "ymin", "xmax", "ymax"].contains(k)) {
        return Err(AnnotationError::Schema {
            element: format!("{ctx}/{other}"),
            msg: "unexpected element in box".into(),
        });
    }
    let b = BBox {
        xmin: number(node, "xmin", ctx)?,
        ymin: number(node, "ymin", ctx)?,
        xmax: number(node, "xmax", ctx)?,
        ymax: number(node, "ymax", ctx)?,
    };
    b.validate("box").map_err(|e| AnnotationError::Schema {
        element: ctx.to_string(),
        msg: e.to_string(),
    })?;
    Ok(b)
}

fn raw<'i>(src: &'i str, node: roxmltree::Node) -> &'i str {
    &src[node.range()]
}

const DOC_KNOWN: [&str; 7] = ["folder", "filename", "path", "source", "size", "segmented", "object"];
const OBJ_KNOWN: [&str; 7] = ["name", "pose", "truncated", "difficult", "bndbox", "delta", "bndbox2"];

/// Parses an annotation document. Objects without `bndbox2` or `delta` are
/// rejected; disagreement between delta and boxes becomes a warning.
pub fn parse_annotation(xml: &[u8]) -> Result<AnnotationDoc, AnnotationError> {
    let src = std::str::from_utf8(xml).map_err(|e| AnnotationError::Schema {
        element: "annotation".into(),
        msg: format!("not UTF-8: {e}"),
    })?;
    let tree = roxmltree::Document::parse(src)?;
    let root = tree.root_element();
    if root.tag_name().name() != "annotation" {
        return Err(AnnotationError::Schema {
            element: root.tag_name().name().to_string(),
            msg: "root element must be <annotation>".into(),
        });
    }
    let size_node = req_child(root, "size")?;
    let int = |name: &str| -> Result<u32, AnnotationError> {
        let v = number(size_node, name, "size")?;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(AnnotationError::Schema {
                element: format!("size/{name}"),
                msg: format!("expected a non-negative integer, got {v}"),
            });
        }
        Ok(v as u32)
    };
    let size = ImageSize {
        width: int("width")?,
        height: int("height")?,
        depth: int("depth")?,
    };
    let filename = text_of(req_child(root, "filename")?);
    let database = child(root, "source")
        .map(|s| opt_text(s, "database", "Unknown"))
        .unwrap_or_else(|| "Unknown".into());

    let mut objects = vec![];
    let mut extra = vec![];
    for node in root.children().filter(|c| c.is_element()) {
        let tag = node.tag_name().name();
        if tag == "object" {
            objects.push(parse_object(src, node)?);
        } else if !DOC_KNOWN.contains(&tag) {
            extra.push(raw(src, node).to_string());
        }
    }
    let mut doc = AnnotationDoc {
        folder: opt_text(root, "folder", ""),
        filename,
        path: opt_text(root, "path", ""),
        database,
        size,
        segmented: opt_text(root, "segmented", "0"),
        objects,
        extra,
        warnings: vec![],
    };
    doc.validate()?;
    doc.refresh_warnings()?;
    for w in &doc.warnings {
        log::warn!("{}: {w}", doc.filename);
    }
    Ok(doc)
}

fn parse_object(src: &str, node: roxmltree::Node) -> Result<AnnotatedObject, AnnotationError> {
    let delta_node = req_child(node, "delta")?;
    let delta = ObjectDisparity {
        dx: number(delta_node, "dx", "delta")?,
        dy: number(delta_node, "dy", "delta")?,
    };
    let extra = node
        .children()
        .filter(|c| c.is_element() && !OBJ_KNOWN.contains(&c.tag_name().name()))
        .map(|c| raw(src, c).to_string())
        .collect();
    Ok(AnnotatedObject {
        name: text_of(req_child(node, "name")?),
        pose: opt_text(node, "pose", "Unspecified"),
        truncated: opt_text(node, "truncated", "0"),
        difficult: opt_text(node, "difficult", "0"),
        bndbox: parse_box(req_child(node, "bndbox")?, "bndbox")?,
        delta,
        bndbox2: parse_box(req_child(node, "bndbox2")?, "bndbox2")?,
        extra,
    })
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Integral coordinates print bare ("325"); others print exactly.
fn fmt_coord(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Disparity keeps at least one decimal ("28.0").
fn fmt_delta(v: f64) -> String {
    let one = format!("{v:.1}");
    if one.parse::<f64>() == Ok(v) {
        one
    } else {
        format!("{v}")
    }
}

fn write_box(out: &mut String, tag: &str, b: &BBox) {
    let _ = writeln!(out, "    <{tag}>");
    for (k, v) in [("xmin", b.xmin), ("ymin", b.ymin), ("xmax", b.xmax), ("ymax", b.ymax)] {
        let _ = writeln!(out, "      <{k}>{}</{k}>", fmt_coord(v));
    }
    let _ = writeln!(out, "    </{tag}>");
}

/// Serialises a document in the canonical element order
/// (`bndbox`, `delta`, `bndbox2` per object).
pub fn write_annotation(doc: &AnnotationDoc) -> Result<Vec<u8>, AnnotationError> {
    doc.validate()?;
    let mut out = String::new();
    out.push_str("<annotation>\n");
    let _ = writeln!(out, "  <folder>{}</folder>", escape(&doc.folder));
    let _ = writeln!(out, "  <filename>{}</filename>", escape(&doc.filename));
    let _ = writeln!(out, "  <path>{}</path>", escape(&doc.path));
    let _ = writeln!(
        out,
        "  <source>\n    <database>{}</database>\n  </source>",
        escape(&doc.database)
    );
    let _ = writeln!(
        out,
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>{}</depth>\n  </size>",
        doc.size.width, doc.size.height, doc.size.depth
    );
    let _ = writeln!(out, "  <segmented>{}</segmented>", escape(&doc.segmented));
    for o in &doc.objects {
        out.push_str("  <object>\n");
        let _ = writeln!(out, "    <name>{}</name>", escape(&o.name));
        let _ = writeln!(out, "    <pose>{}</pose>", escape(&o.pose));
        let _ = writeln!(out, "    <truncated>{}</truncated>", escape(&o.truncated));
        let _ = writeln!(out, "    <difficult>{}</difficult>", escape(&o.difficult));
        write_box(&mut out, "bndbox", &o.bndbox);
        let _ = writeln!(
            out,
            "    <delta>\n      <dx>{}</dx>\n      <dy>{}</dy>\n    </delta>",
            fmt_delta(o.delta.dx),
            fmt_delta(o.delta.dy)
        );
        write_box(&mut out, "bndbox2", &o.bndbox2);
        for e in &o.extra {
            let _ = writeln!(out, "    {e}");
        }
        out.push_str("  </object>\n");
    }
    for e in &doc.extra {
        let _ = writeln!(out, "  {e}");
    }
    out.push_str("</annotation>\n");
    Ok(out.into_bytes())
}

/// A view-frame ground-truth object, flagged when its stored disparity
/// disagrees with its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub object: StereoObject,
    pub recomputed: ObjectDisparity,
    pub flagged: bool,
}

/// Converts stacked-frame annotations into view-frame targets. The stored
/// delta is kept as the object's disparity.
pub fn doc_to_targets(doc: &AnnotationDoc) -> Result<Vec<GroundTruth>, AnnotationError> {
    doc.validate()?;
    let (w, vh) = doc.view_size();
    doc.objects
        .iter()
        .map(|o| {
            let right = o.bndbox2.translate(0.0, -vh);
            let recomputed = object_disparity(&o.bndbox, &right, w, vh)?;
            Ok(GroundTruth {
                flagged: recomputed.max_abs_diff(&o.delta) > DELTA_TOLERANCE,
                recomputed,
                object: StereoObject {
                    label: o.name.clone(),
                    left_box: o.bndbox,
                    right_box: right,
                    disparity: o.delta,
                },
            })
        })
        .collect()
}

/// Stacks two equally sized images, left on top.
pub fn stack_pair<P: Pixel>(
    left: &ImageBuffer<P, Vec<P::Subpixel>>,
    right: &ImageBuffer<P, Vec<P::Subpixel>>,
) -> Result<ImageBuffer<P, Vec<P::Subpixel>>, AnnotationError> {
    if left.dimensions() != right.dimensions() {
        let c = P::CHANNEL_COUNT;
        return Err(AnnotationError::ImageMismatch {
            left: (left.width(), left.height(), c),
            right: (right.width(), right.height(), c),
        });
    }
    let (w, h) = left.dimensions();
    let mut raw: Vec<P::Subpixel> = Vec::with_capacity(left.as_raw().len() * 2);
    raw.extend_from_slice(left.as_raw());
    raw.extend_from_slice(right.as_raw());
    Ok(ImageBuffer::from_raw(w, 2 * h, raw).expect("buffer sized for stacked image"))
}

/// Stacks decoded images of possibly different formats, failing on any
/// width, height, or channel-count mismatch.
pub fn stack_dynamic(
    left: &image::DynamicImage,
    right: &image::DynamicImage,
) -> Result<image::RgbImage, AnnotationError> {
    let shape = |i: &image::DynamicImage| (i.width(), i.height(), i.color().channel_count());
    if shape(left) != shape(right) {
        return Err(AnnotationError::ImageMismatch {
            left: shape(left),
            right: shape(right),
        });
    }
    stack_pair(&left.to_rgb8(), &right.to_rgb8())
}

/// Splits a stacked image back into (left, right).
#[allow(clippy::type_complexity)]
pub fn unstack<P: Pixel>(
    stacked: &ImageBuffer<P, Vec<P::Subpixel>>,
) -> Result<(ImageBuffer<P, Vec<P::Subpixel>>, ImageBuffer<P, Vec<P::Subpixel>>), AnnotationError> {
    let (w, h) = stacked.dimensions();
    if h % 2 != 0 {
        return Err(AnnotationError::Invariant(format!("stacked height {h} is odd")));
    }
    let half = stacked.as_raw().len() / 2;
    let top = ImageBuffer::from_raw(w, h / 2, stacked.as_raw()[..half].to_vec()).expect("top half");
    let bottom = ImageBuffer::from_raw(w, h / 2, stacked.as_raw()[half..].to_vec()).expect("bottom half");
    Ok((top, bottom))
}

/// Camera system a sample was captured with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceSystem {
    S1,
    S2,
    DashCam,
    Kitti,
    Synth,
}

impl SourceSystem {
    pub const ALL: [SourceSystem; 5] = [
        SourceSystem::S1,
        SourceSystem::S2,
        SourceSystem::DashCam,
        SourceSystem::Kitti,
        SourceSystem::Synth,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            SourceSystem::S1 => "S1",
            SourceSystem::S2 => "S2",
            SourceSystem::DashCam => "DashCam",
            SourceSystem::Kitti => "Kitti",
            SourceSystem::Synth => "Synth",
        }
    }
}

impl FromStr for SourceSystem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SourceSystem::ALL
            .iter()
            .copied()
            .find(|v| v.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown source system {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub source: SourceSystem,
}

impl IndexEntry {
    /// Sample id: the stacked image's file stem.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Tab-separated list of (stacked image, annotation, source tag).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    /// Parses index text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, AnnotationError> {
        let mut entries = vec![];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(AnnotationError::Index {
                    line: i + 1,
                    msg: format!("expected 3 tab-separated columns, got {}", cols.len()),
                });
            }
            let source = cols[2]
                .parse()
                .map_err(|msg| AnnotationError::Index { line: i + 1, msg })?;
            entries.push(IndexEntry {
                image: base.join(cols[0]),
                annotation: base.join(cols[1]),
                source,
            });
        }
        Ok(DatasetIndex { entries })
    }

    /// Reads an index file and checks that every referenced path exists.
    pub fn load(path: &Path) -> Result<Self, AnnotationError> {
        Self::load_checked(path, true)
    }

    /// Like [`load`](Self::load) but only images must exist, for datasets
    /// that are not annotated yet.
    pub fn load_images(path: &Path) -> Result<Self, AnnotationError> {
        Self::load_checked(path, false)
    }

    fn load_checked(path: &Path, annotations: bool) -> Result<Self, AnnotationError> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let idx = Self::parse(&text, base)?;
        for (i, e) in idx.entries.iter().enumerate() {
            let required = if annotations {
                &[&e.image, &e.annotation][..]
            } else {
                &[&e.image][..]
            };
            for p in required.iter() {
                if !p.exists() {
                    return Err(AnnotationError::Index {
                        line: i + 1,
                        msg: format!("{} does not exist", p.display()),
                    });
                }
            }
        }
        Ok(idx)
    }

    /// Index text; paths are written relative to `base` when possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", rel(&e.image), rel(&e.annotation), e.source.tag()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE_DOC: &str = r#"<annotation>
  <folder>testset</folder>
  <filename>kitti_stacked_000008_10.jpg</filename>
  <path>/mnt/lspro/ssd6c/testset/kitti_stacked_000008_10.jpg</path>
  <source>
    <database>Unknown</database>
  </source>
  <size>
    <width>1242</width>
    <height>750</height>
    <depth>3</depth>
  </size>
  <segmented>0</segmented>
  <object>
    <name>car</name>
    <pose>Unspecified</pose>
    <truncated>0</truncated>
    <difficult>0</difficult>
    <bndbox>
      <xmin>325</xmin>
      <ymin>192</ymin>
      <xmax>416</xmax>
      <ymax>261</ymax>
    </bndbox>
    <delta>
      <dx>28.0</dx>
      <dy>-2.0</dy>
    </delta>
    <bndbox2>
      <xmin>297</xmin>
      <ymin>569</ymin>
      <xmax>388</xmax>
      <ymax>638</ymax>
    </bndbox2>
  </object>
</annotation>
"#;

    #[test]
    fn parses_reference_document() {
        let doc = parse_annotation(SAMPLE_DOC.as_bytes()).unwrap();
        assert_eq!(
            doc.size,
            ImageSize {
                width: 1242,
                height: 750,
                depth: 3
            }
        );
        assert_eq!(doc.objects.len(), 1);
        let o = &doc.objects[0];
        assert_eq!(o.name, "car");
        assert_eq!(
            o.bndbox,
            BBox {
                xmin: 325.,
                ymin: 192.,
                xmax: 416.,
                ymax: 261.
            }
        );
        assert_eq!(
            o.bndbox2,
            BBox {
                xmin: 297.,
                ymin: 569.,
                xmax: 388.,
                ymax: 638.
            }
        );
        assert_eq!(o.delta, ObjectDisparity::new(28.0, -2.0));
        assert!(doc.warnings.is_empty());
    }

    #[test]
    fn write_is_byte_identical_for_canonical_input() {
        let doc = parse_annotation(SAMPLE_DOC.as_bytes()).unwrap();
        let out = write_annotation(&doc).unwrap();
        assert_eq!(std::str::from_utf8(&out).unwrap(), SAMPLE_DOC);
        assert_eq!(parse_annotation(&out).unwrap(), doc);
    }

    #[test]
    fn targets_in_view_frame() {
        let doc = parse_annotation(SAMPLE_DOC.as_bytes()).unwrap();
        let t = doc_to_targets(&doc).unwrap();
        assert_eq!(
            t[0].object.right_box,
            BBox {
                xmin: 297.,
                ymin: 194.,
                xmax: 388.,
                ymax: 263.
            }
        );
        assert_eq!(t[0].recomputed, ObjectDisparity::new(28.0, -2.0));
        assert!(!t[0].flagged);
    }

    #[test]
    fn inconsistent_delta_is_warned_not_rejected() {
        let xml = SAMPLE_DOC.replace("<dx>28.0</dx>", "<dx>30.0</dx>");
        let doc = parse_annotation(xml.as_bytes()).unwrap();
        assert_eq!(doc.warnings.len(), 1);
        assert_eq!(doc.warnings[0].recomputed.dx, 28.0);
        let t = doc_to_targets(&doc).unwrap();
        assert!(t[0].flagged);
        assert_eq!(t[0].object.disparity.dx, 30.0);
    }

    #[test]
    fn schema_errors_name_the_element() {
        let no_b2 = SAMPLE_DOC.replace("bndbox2>", "other>");
        let e = parse_annotation(no_b2.as_bytes()).unwrap_err();
        assert!(e.to_string().contains("bndbox2"), "{e}");

        let no_delta = SAMPLE_DOC.replace("delta>", "notdelta>");
        assert!(parse_annotation(no_delta.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("delta"));

        let top_half = SAMPLE_DOC.replace("<ymin>569</ymin>", "<ymin>100</ymin>");
        let e = parse_annotation(top_half.as_bytes()).unwrap_err();
        assert!(e.to_string().contains("bndbox2"), "{e}");

        // duplicated ymin inside a box
        let dup = SAMPLE_DOC.replace("<ymax>261</ymax>", "<ymin>254</ymin>");
        let e = parse_annotation(dup.as_bytes()).unwrap_err();
        assert!(e.to_string().contains("bndbox/"), "{e}");

        assert!(matches!(
            parse_annotation(b"<annotation><size>"),
            Err(AnnotationError::Xml(_))
        ));
        let odd = SAMPLE_DOC.replace("<height>750</height>", "<height>751</height>");
        assert!(parse_annotation(odd.as_bytes()).is_err());
    }

    #[test]
    fn unknown_elements_survive_round_trip() {
        let xml = SAMPLE_DOC
            .replace(
                "<segmented>0</segmented>",
                "<segmented>0</segmented>\n  <camera rig=\"S2\">left-first</camera>",
            )
            .replace(
                "<difficult>0</difficult>",
                "<difficult>0</difficult>\n    <occluded>1</occluded>",
            );
        let doc = parse_annotation(xml.as_bytes()).unwrap();
        assert_eq!(doc.extra, vec!["<camera rig=\"S2\">left-first</camera>".to_string()]);
        assert_eq!(doc.objects[0].extra, vec!["<occluded>1</occluded>".to_string()]);
        let again = parse_annotation(&write_annotation(&doc).unwrap()).unwrap();
        assert_eq!(again, doc);
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(fmt_delta(28.0), "28.0");
        assert_eq!(fmt_delta(-2.0), "-2.0");
        assert_eq!(fmt_delta(0.25), "0.25");
        assert_eq!(fmt_coord(325.0), "325");
        assert_eq!(fmt_coord(325.5), "325.5");
    }

    #[test]
    fn write_refuses_invalid_doc() {
        let mut doc = parse_annotation(SAMPLE_DOC.as_bytes()).unwrap();
        doc.objects[0].bndbox2 = doc.objects[0].bndbox;
        assert!(write_annotation(&doc).is_err());
    }

    #[test]
    fn stacking() {
        let l = image::RgbImage::from_pixel(640, 320, image::Rgb([1, 2, 3]));
        let r = image::RgbImage::from_pixel(640, 320, image::Rgb([4, 5, 6]));
        let s = stack_pair(&l, &r).unwrap();
        assert_eq!(s.dimensions(), (640, 640));
        assert_eq!(s.get_pixel(10, 319).0, [1, 2, 3]);
        assert_eq!(s.get_pixel(10, 320).0, [4, 5, 6]);
        let (l2, r2) = unstack(&s).unwrap();
        assert_eq!((&l2, &r2), (&l, &r));

        let a = image::GrayImage::from_pixel(1, 1, image::Luma([7]));
        let b = image::GrayImage::from_pixel(1, 1, image::Luma([9]));
        assert_eq!(stack_pair(&a, &b).unwrap().as_raw(), &vec![7, 9]);

        let bad = image::RgbImage::new(640, 300);
        let e = stack_pair(&l, &bad).unwrap_err();
        assert!(
            e.to_string().contains("640, 320") && e.to_string().contains("640, 300"),
            "{e}"
        );
        let gray = image::DynamicImage::ImageLuma8(image::GrayImage::new(640, 320));
        assert!(stack_dynamic(&image::DynamicImage::ImageRgb8(l), &gray).is_err());
    }

    #[test]
    fn index_parsing() {
        let idx = DatasetIndex::parse(
            "a.png\ta.xml\tKitti\n# comment\nb.png\tb.xml\tdashcam\n",
            Path::new("/d"),
        )
        .unwrap();
        assert_eq!(idx.entries.len(), 2);
        assert_eq!(idx.entries[1].source, SourceSystem::DashCam);
        assert_eq!(idx.entries[0].image, Path::new("/d/a.png"));
        assert_eq!(idx.entries[0].id(), "a");
        assert_eq!(
            idx.to_text(Path::new("/d")),
            "a.png\ta.xml\tKitti\nb.png\tb.xml\tDashCam\n"
        );
        assert!(DatasetIndex::parse("a.png\ta.xml\tMars\n", Path::new(".")).is_err());
        assert!(DatasetIndex::parse("a.png a.xml\n", Path::new(".")).is_err());
    }

    #[test]
    fn class_vocabulary() {
        assert_eq!(class_index("car"), Some(1));
        assert_eq!(class_index("trafficsign"), Some(4));
        assert_eq!(class_index("background"), None);
        assert_eq!(class_index("tree"), None);
    }
}
