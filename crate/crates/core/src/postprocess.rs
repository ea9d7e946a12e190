//! Scores and offsets to detections: softmax, thresholding, class-wise NMS
//! and the paired right-view box.

use std::fmt::Write as _;

use crate::codec::{decode_locations, CodecError};
use crate::geometry::BBox;
use crate::model::{ModelConfig, Prior};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    /// Left-view box in view pixels.
    pub left_box: BBox,
    pub dx: f64,
    pub dy: f64,
}

impl Detection {
    /// The left box moved by `(-dx, -dy)`.
    pub fn right_box(&self) -> BBox {
        self.left_box.translate(-self.dx, -self.dy)
    }

    /// Disparity rounded for display.
    pub fn display_disparity(&self) -> (i64, i64) {
        (self.dx.round() as i64, self.dy.round() as i64)
    }
}

/// Greedy hard suppression: repeatedly keep the best remaining box and drop
/// those overlapping it by more than `iou_threshold`. Score ties go to the
/// lower index.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64, top_k: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    let mut removed = vec![false; boxes.len()];
    for (pos, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        if keep.len() == top_k {
            break;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !removed[j] && boxes[i].iou(&boxes[j]) > iou_threshold {
                removed[j] = true;
            }
        }
    }
    keep
}

/// Row-wise softmax of a (N, P, K) tensor, in f64.
pub fn softmax_scores<T: Element>(confidences: &Tensor<T>) -> Vec<f64> {
    let k = *confidences.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(confidences.numel());
    for row in confidences.data().chunks(k.max(1)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Per-image detections from forward outputs.
pub fn detect<T: Element>(
    confidences: &Tensor<T>,
    locations: &Tensor<T>,
    priors: &[Prior],
    config: &ModelConfig,
) -> Result<Vec<Vec<Detection>>, CodecError> {
    let decoded = decode_locations(locations, priors, config)?;
    let k = config.num_classes();
    if confidences.shape() != [decoded.len(), priors.len(), k] {
        return Err(CodecError::Shape {
            what: "confidences",
            expected: vec![decoded.len(), priors.len(), k],
            got: confidences.shape().to_vec(),
        });
    }
    let probs = softmax_scores(confidences);
    let p = priors.len();
    let mut result = Vec::with_capacity(decoded.len());
    for (n, boxes) in decoded.iter().enumerate() {
        let mut dets = Vec::new();
        for class in 1..k {
            let cand: Vec<usize> = (0..p)
                .filter(|&j| probs[(n * p + j) * k + class] >= config.score_threshold)
                .collect();
            if cand.is_empty() {
                continue;
            }
            let cb: Vec<BBox> = cand.iter().map(|&j| boxes[j].bbox).collect();
            let cs: Vec<f64> = cand.iter().map(|&j| probs[(n * p + j) * k + class]).collect();
            for i in nms(&cb, &cs, config.nms_iou_threshold, config.top_k) {
                let d = &boxes[cand[i]];
                dets.push(Detection {
                    class_id: class,
                    score: cs[i],
                    left_box: d.bbox,
                    dx: d.dx,
                    dy: d.dy,
                });
            }
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
        dets.truncate(config.top_k);
        result.push(dets);
    }
    Ok(result)
}

/// One detection with the image it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_name: String,
    pub detection: Detection,
}

/// Tab-separated: image id, class, score, xmin, ymin, xmax, ymax, dx, dy.
pub fn write_records(records: &[DetectionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let d = &r.detection;
        let b = &d.left_box;
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.image_id, r.class_name, d.score, b.xmin, b.ymin, b.xmax, b.ymax, d.dx, d.dy
        )
        .expect("write to string");
    }
    s
}

/// Parses [`write_records`] output. Class ids are resolved against `config`.
pub fn read_records(text: &str, config: &ModelConfig) -> Result<Vec<DetectionRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(format!("line {}: expected 9 fields, got {}", i + 1, f.len()));
        }
        let num = |s: &str| -> Result<f64, String> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| format!("line {}: bad number {s:?}", i + 1))
        };
        let class_id = config
            .class_id(f[1])
            .ok_or_else(|| format!("line {}: unknown class {:?}", i + 1, f[1]))?;
        out.push(DetectionRecord {
            image_id: f[0].to_string(),
            class_name: f[1].to_string(),
            detection: Detection {
                class_id,
                score: num(f[2])?,
                left_box: BBox {
                    xmin: num(f[3])?,
                    ymin: num(f[4])?,
                    xmax: num(f[5])?,
                    ymax: num(f[6])?,
                },
                dx: num(f[7])?,
                dy: num(f[8])?,
            },
        });
    }
    Ok(out)
}
