//! Evaluation against annotated disparity and, optionally, dense KITTI
//! disparity maps: percentile-in-box, precision/recall, error histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{BBox, StereoObject};
use crate::postprocess::Detection;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("disparity map: {0}")]
    Format(String),
    #[error("percentile {0} outside (0, 100]")]
    Percentile(f64),
}

/// Dense per-pixel disparity with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    /// Map from raw KITTI codes (`raw / 256`, 0 = invalid), row-major.
    pub fn from_raw(width: usize, height: usize, raw: &[u16]) -> Self {
        DisparityMap {
            width,
            height,
            values: raw.iter().map(|&r| r as f32 / 256.0).collect(),
            valid: raw.iter().map(|&r| r != 0).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }
}

/// Decodes a 16-bit single-channel PNG.
pub fn read_disparity_gt(png: &[u8]) -> Result<DisparityMap, EvalError> {
    let img = image::load_from_memory_with_format(png, image::ImageFormat::Png)
        .map_err(|e| EvalError::Format(e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Ok(DisparityMap::from_raw(w as usize, h as usize, buf.as_raw()))
        }
        other => Err(EvalError::Format(format!(
            "expected 16-bit single-channel PNG, got {:?}",
            other.color()
        ))),
    }
}

/// Nearest-rank percentile of `values` (index `ceil(q·n/100) − 1` of the
/// ascending sort). `None` for an empty sample.
pub fn nearest_rank(values: &mut [f32], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let idx = ((q * n as f64 / 100.0).ceil() as usize).clamp(1, n) - 1;
    let (_, v, _) = values.select_nth_unstable_by(idx, f32::total_cmp);
    Some(*v as f64)
}

/// Pixel columns/rows covered by `b`, clipped to the map.
fn pixel_range(lo: f64, hi: f64, size: usize) -> std::ops::Range<usize> {
    let a = lo.floor().max(0.0) as usize;
    let b = (hi.ceil().max(0.0) as usize).min(size);
    a.min(b)..b
}

/// Nearest-rank percentile of the valid disparities inside `b`; `Ok(None)`
/// when the box holds no valid pixel.
pub fn bbox_percentile_disparity(map: &DisparityMap, b: &BBox, q: f64) -> Result<Option<f64>, EvalError> {
    if !(q > 0.0 && q <= 100.0) {
        return Err(EvalError::Percentile(q));
    }
    let mut vals = Vec::new();
    for y in pixel_range(b.ymin, b.ymax, map.height) {
        for x in pixel_range(b.xmin, b.xmax, map.width) {
            if let Some(v) = map.get(x, y) {
                vals.push(v);
            }
        }
    }
    Ok(nearest_rank(&mut vals, q))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// (detection index, ground-truth index).
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy matching in descending score order: each detection takes the
/// unmatched ground truth with the highest IoU at or above `iou_threshold`.
/// Ties go to the lower index.
pub fn match_detections(dets: &[(BBox, f64)], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut r = MatchResult::default();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = dets[d].0.iou(gb);
            if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                r.pairs.push((d, g));
                r.true_positives += 1;
            }
            None => r.false_positives += 1,
        }
    }
    r.false_negatives = gts.len() - r.true_positives;
    r
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Histogram {
    /// Count per unit bin `[i, i + 1)`.
    pub bins: Vec<usize>,
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

pub fn disparity_error_histogram(errors: &[f64]) -> Histogram {
    if errors.is_empty() {
        return Histogram::default();
    }
    let max = errors.iter().fold(0f64, |m, &e| m.max(e));
    let mut bins = vec![0; max.floor() as usize + 1];
    for &e in errors {
        bins[e.floor() as usize] += 1;
    }
    Histogram {
        bins,
        mean: errors.iter().sum::<f64>() / errors.len() as f64,
        max,
        count: errors.len(),
    }
}

/// Everything known about one test image.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub image_id: String,
    pub ground_truth: Vec<StereoObject>,
    pub detections: Vec<Detection>,
    pub dense: Option<DisparityMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Class names indexed by class id, background first.
    pub class_names: Vec<String>,
    /// Classes left out of precision/recall when dense maps are used.
    pub dense_excluded: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            class_names: crate::annotation::CLASSES.iter().map(|s| s.to_string()).collect(),
            dense_excluded: vec!["person".into(), "bike".into()],
        }
    }
}

/// One matched detection as a report row.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRow {
    pub image_id: String,
    pub class_name: String,
    pub confidence: f64,
    pub predicted_dx: f64,
    pub gt_dx: f64,
    pub dense_95: Option<f64>,
    pub dense_97: Option<f64>,
}

impl DetectionRow {
    /// `car, 0.99, 33, 33, 28, 31`; missing dense values print as `-`.
    pub fn table_row(&self) -> String {
        let d = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{}", v.round() as i64));
        format!(
            "{}, {:.2}, {}, {}, {}, {}",
            self.class_name,
            self.confidence,
            self.predicted_dx.round() as i64,
            self.gt_dx.round() as i64,
            d(self.dense_95),
            d(self.dense_97)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassStats {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ClassStats {
    pub fn precision(&self) -> Option<f64> {
        let d = self.true_positives + self.false_positives;
        (d > 0).then(|| self.true_positives as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.true_positives + self.false_negatives;
        (d > 0).then(|| self.true_positives as f64 / d as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub images: usize,
    pub dense_mode: bool,
    pub per_class: BTreeMap<String, ClassStats>,
    pub histogram: Histogram,
    pub rows: Vec<DetectionRow>,
    /// Matched objects whose box held no valid dense pixel.
    pub no_dense_data: usize,
}

/// Evaluates `samples`. Dense mode is on when any sample carries a map.
pub fn evaluate(samples: &[EvalSample], config: &EvalConfig) -> EvalReport {
    let dense_mode = samples.iter().any(|s| s.dense.is_some());
    let mut report = EvalReport {
        images: samples.len(),
        dense_mode,
        ..Default::default()
    };
    let mut errors = Vec::new();
    // sorted by id so the result does not depend on input order
    let mut order: Vec<&EvalSample> = samples.iter().collect();
    order.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for s in order {
        for (class_id, name) in config.class_names.iter().enumerate().skip(1) {
            let dets: Vec<&Detection> = s.detections.iter().filter(|d| d.class_id == class_id).collect();
            let gts: Vec<&StereoObject> = s.ground_truth.iter().filter(|g| &g.label == name).collect();
            let m = match_detections(
                &dets.iter().map(|d| (d.left_box, d.score)).collect::<Vec<_>>(),
                &gts.iter().map(|g| g.left_box).collect::<Vec<_>>(),
                config.iou_threshold,
            );
            if !(dense_mode && config.dense_excluded.contains(name)) {
                let st = report.per_class.entry(name.clone()).or_default();
                st.true_positives += m.true_positives;
                st.false_positives += m.false_positives;
                st.false_negatives += m.false_negatives;
            }
            for &(di, gi) in &m.pairs {
                let (d, g) = (dets[di], gts[gi]);
                let pct = |q| {
                    s.dense
                        .as_ref()
                        .and_then(|map| bbox_percentile_disparity(map, &d.left_box, q).ok().flatten())
                };
                let (d95, d97) = (pct(95.0), pct(97.0));
                if s.dense.is_some() && d95.is_none() {
                    report.no_dense_data += 1;
                }
                errors.push((d.dx - g.disparity.dx).abs());
                report.rows.push(DetectionRow {
                    image_id: s.image_id.clone(),
                    class_name: name.clone(),
                    confidence: d.score,
                    predicted_dx: d.dx,
                    gt_dx: g.disparity.dx,
                    dense_95: d95,
                    dense_97: d97,
                });
            }
        }
    }
    report.histogram = disparity_error_histogram(&errors);
    report
}

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

impl EvalReport {
    /// Human-readable report: summary, histogram, then per-detection rows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Total test images: {}", self.images);
        for (name, st) in &self.per_class {
            let _ = writeln!(
                s,
                "{name}: precision {} recall {} (tp {}, fp {}, fn {})",
                opt(st.precision()),
                opt(st.recall()),
                st.true_positives,
                st.false_positives,
                st.false_negatives
            );
        }
        let h = &self.histogram;
        let _ = writeln!(s, "Mean abs obj disparity error: {:.2}", h.mean);
        let _ = writeln!(s, "Max abs obj disparity error: {:.2}", h.max);
        let _ = writeln!(s, "Abs obj disparity error histogram (pixel):");
        for (i, c) in h.bins.iter().enumerate() {
            let _ = writeln!(s, "  [{i}, {}): {c}", i + 1);
        }
        if self.dense_mode {
            let _ = writeln!(s, "Objects without dense data: {}", self.no_dense_data);
        }
        let _ = writeln!(s, "class, confidence, predicted dx, gt dx, 95% dx, 97% dx");
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.table_row());
        }
        s
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images={}", self.images);
        let _ = writeln!(s, "dense_mode={}", self.dense_mode);
        for (name, st) in &self.per_class {
            let _ = writeln!(s, "{name}.tp={}", st.true_positives);
            let _ = writeln!(s, "{name}.fp={}", st.false_positives);
            let _ = writeln!(s, "{name}.fn={}", st.false_negatives);
            let _ = writeln!(s, "{name}.precision={}", opt(st.precision()));
            let _ = writeln!(s, "{name}.recall={}", opt(st.recall()));
        }
        let h = &self.histogram;
        let _ = writeln!(s, "matched={}", h.count);
        let _ = writeln!(s, "mean_abs_dx_error={}", h.mean);
        let _ = writeln!(s, "max_abs_dx_error={}", h.max);
        let bins: Vec<String> = h.bins.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "histogram={}", bins.join(","));
        let _ = writeln!(s, "no_dense_data={}", self.no_dense_data);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ObjectDisparity;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox {
            xmin: x0,
            ymin: y0,
            xmax: x1,
            ymax: y1,
        }
    }

    #[test]
    fn raw_codes() {
        let m = DisparityMap::from_raw(3, 1, &[0, 256, 12800]);
        assert_eq!(m.get(0, 0), None);
        assert_eq!(m.get(1, 0), Some(1.0));
        assert_eq!(m.get(2, 0), Some(50.0));
    }

    #[test]
    fn png_decoding() {
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 1, vec![0u16, 12800]).unwrap();
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        let m = read_disparity_gt(buf.get_ref()).unwrap();
        assert_eq!((m.get(0, 0), m.get(1, 0)), (None, Some(50.0)));

        let rgb = image::RgbImage::new(2, 2);
        let mut buf = std::io::Cursor::new(Vec::new());
        rgb.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        assert!(read_disparity_gt(buf.get_ref()).is_err());
    }

    #[test]
    fn percentiles() {
        let raw: Vec<u16> = (1..=100).map(|v| v * 256).collect();
        let m = DisparityMap::from_raw(10, 10, &raw);
        let all = b(0., 0., 10., 10.);
        assert_eq!(bbox_percentile_disparity(&m, &all, 95.0).unwrap(), Some(95.0));
        assert_eq!(bbox_percentile_disparity(&m, &all, 100.0).unwrap(), Some(100.0));
        let one = b(3., 0., 4., 1.);
        assert_eq!(bbox_percentile_disparity(&m, &one, 1.0).unwrap(), Some(4.0));
        let c = DisparityMap::from_raw(4, 4, &[7 * 256; 16]);
        assert_eq!(
            bbox_percentile_disparity(&c, &b(1., 1., 3., 3.), 95.0).unwrap(),
            Some(7.0)
        );
        let empty = DisparityMap::from_raw(2, 2, &[0; 4]);
        assert_eq!(
            bbox_percentile_disparity(&empty, &b(0., 0., 2., 2.), 95.0).unwrap(),
            None
        );
        assert!(bbox_percentile_disparity(&m, &all, 0.0).is_err());
    }

    #[test]
    fn histogram_binning() {
        let h = disparity_error_histogram(&[0.5, 1.5, 1.6]);
        assert_eq!(h.bins, vec![1, 2]);
        assert!((h.max - 1.6).abs() < 1e-12);
        assert_eq!(disparity_error_histogram(&[]).bins, Vec::<usize>::new());
    }

    #[test]
    fn table_row_format() {
        let r = DetectionRow {
            image_id: "x".into(),
            class_name: "car".into(),
            confidence: 0.99,
            predicted_dx: 33.0,
            gt_dx: 33.0,
            dense_95: Some(28.0),
            dense_97: Some(31.0),
        };
        assert_eq!(r.table_row(), "car, 0.99, 33, 33, 28, 31");
    }

    #[test]
    fn perfect_detections() {
        let gt = StereoObject {
            label: "car".into(),
            left_box: b(10., 10., 50., 40.),
            right_box: b(0., 10., 40., 40.),
            disparity: ObjectDisparity::new(10.0, 0.0),
        };
        let det = Detection {
            class_id: 1,
            score: 0.9,
            left_box: gt.left_box,
            dx: 10.0,
            dy: 0.0,
        };
        let s = EvalSample {
            image_id: "a".into(),
            ground_truth: vec![gt],
            detections: vec![det],
            dense: None,
        };
        let r = evaluate(std::slice::from_ref(&s), &EvalConfig::default());
        let car = &r.per_class["car"];
        assert_eq!((car.precision(), car.recall()), (Some(1.0), Some(1.0)));
        assert_eq!(r.histogram.max, 0.0);

        let none = EvalSample {
            detections: vec![],
            ..s
        };
        let r = evaluate(&[none], &EvalConfig::default());
        assert_eq!(r.per_class["car"].recall(), Some(0.0));
    }
}
