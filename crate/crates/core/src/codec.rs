//! Prior matching, six-channel target encoding, decoding, and the
//! multibox + disparity loss.

use thiserror::Error;

use crate::geometry::{BBox, StereoObject};
use crate::model::{ModelConfig, Prior, LOC_DIMS};
use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

/// Largest log-size offset accepted by the decoder before exponentiation.
const MAX_LOG_SCALE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ground truth in network units: class index, normalized left box, and
/// disparity in view pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub label: usize,
    pub bbox: BBox,
    pub dx: f64,
    pub dy: f64,
}

/// Converts view-pixel objects to normalized targets. Unknown classes and
/// zero-area boxes are dropped with a warning.
pub fn normalize_objects(objects: &[StereoObject], config: &ModelConfig) -> (Vec<GtBox>, Vec<String>) {
    let (w, h) = (config.view_width as f64, config.view_height as f64);
    let mut out = Vec::with_capacity(objects.len());
    let mut warnings = Vec::new();
    for (i, o) in objects.iter().enumerate() {
        let Some(label) = config.class_id(&o.label) else {
            warnings.push(format!("object {i}: unknown class {:?}", o.label));
            continue;
        };
        if o.left_box.area() <= 0.0 {
            warnings.push(format!("object {i}: zero-area box excluded"));
            continue;
        }
        out.push(GtBox {
            label,
            bbox: o.left_box.scale(1.0 / w, 1.0 / h),
            dx: o.disparity.dx,
            dy: o.disparity.dy,
        });
    }
    (out, warnings)
}

/// Per-prior matching result.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Matched ground-truth index for positive priors.
    pub matched: Vec<Option<usize>>,
    /// Best IoU of each prior over all ground truths.
    pub best_iou: Vec<f64>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

/// Bipartite-then-threshold matching. Each ground truth first claims its
/// best prior (if the overlap is positive); every other prior whose best
/// overlap reaches `threshold` joins its best ground truth. Ties go to the
/// lower index.
pub fn match_priors(gt: &[BBox], priors: &[Prior], threshold: f64) -> Assignment {
    let p = priors.len();
    let mut best_iou = vec![0.0; p];
    let mut best_gt = vec![0usize; p];
    let mut gt_best = vec![(0usize, 0.0f64); gt.len()];
    for (j, prior) in priors.iter().enumerate() {
        let pb = prior.to_bbox();
        for (g, b) in gt.iter().enumerate() {
            let v = pb.iou(b);
            if v > best_iou[j] {
                best_iou[j] = v;
                best_gt[j] = g;
            }
            if v > gt_best[g].1 {
                gt_best[g] = (j, v);
            }
        }
    }
    let mut matched: Vec<Option<usize>> = (0..p)
        .map(|j| (!gt.is_empty() && best_iou[j] >= threshold).then_some(best_gt[j]))
        .collect();
    for (g, &(j, v)) in gt_best.iter().enumerate() {
        if v > 0.0 {
            matched[j] = Some(g);
        }
    }
    Assignment { matched, best_iou }
}

/// Six encoded offsets of `g` relative to `p`.
pub fn encode_box(g: &GtBox, p: &Prior, config: &ModelConfig) -> [f64; LOC_DIMS] {
    let (vc, vs) = config.variances;
    let (cx, cy) = g.bbox.center();
    [
        (cx - p.cx) / p.w / vc,
        (cy - p.cy) / p.h / vc,
        (g.bbox.width() / p.w).ln() / vs,
        (g.bbox.height() / p.h).ln() / vs,
        g.dx / config.view_width as f64 / p.w / vc,
        g.dy / config.view_height as f64 / p.h / vc,
    ]
}

/// A decoded prediction in view pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedBox {
    pub bbox: BBox,
    pub dx: f64,
    pub dy: f64,
    /// A size offset had to be clamped before exponentiation.
    pub clamped: bool,
}

/// Inverse of [`encode_box`], returned in view pixels.
pub fn decode_box(loc: &[f64], p: &Prior, config: &ModelConfig) -> DecodedBox {
    let (vc, vs) = config.variances;
    let (vw, vh) = (config.view_width as f64, config.view_height as f64);
    let lw = loc[2] * vs;
    let lh = loc[3] * vs;
    let clamped = lw > MAX_LOG_SCALE || lh > MAX_LOG_SCALE;
    let cx = p.cx + loc[0] * vc * p.w;
    let cy = p.cy + loc[1] * vc * p.h;
    let w = p.w * lw.min(MAX_LOG_SCALE).exp();
    let h = p.h * lh.min(MAX_LOG_SCALE).exp();
    DecodedBox {
        bbox: BBox::from_center(cx * vw, cy * vh, w * vw, h * vh),
        dx: loc[4] * vc * p.w * vw,
        dy: loc[5] * vc * p.h * vh,
        clamped,
    }
}

/// Decodes (N, P, 6) locations into per-image lists of P boxes.
pub fn decode_locations<T: Element>(
    locations: &Tensor<T>,
    priors: &[Prior],
    config: &ModelConfig,
) -> Result<Vec<Vec<DecodedBox>>, CodecError> {
    let shape = locations.shape();
    if shape.len() != 3 || shape[1] != priors.len() || shape[2] != LOC_DIMS {
        return Err(CodecError::Shape {
            what: "locations",
            expected: vec![shape.first().copied().unwrap_or(0), priors.len(), LOC_DIMS],
            got: shape.to_vec(),
        });
    }
    let data = locations.data();
    Ok((0..shape[0])
        .map(|n| {
            priors
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let o = (n * priors.len() + j) * LOC_DIMS;
                    let loc: Vec<f64> = data[o..o + LOC_DIMS].iter().map(|v| v.as_f64()).collect();
                    decode_box(&loc, p, config)
                })
                .collect()
        })
        .collect())
}

/// Per-prior training targets of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTargets {
    /// Class index per prior, 0 for background.
    pub labels: Vec<usize>,
    /// Encoded offsets; meaningful only where `labels` is non-zero.
    pub locations: Vec<[f64; LOC_DIMS]>,
    pub warnings: Vec<String>,
}

impl EncodedTargets {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Matches `gt` against `priors` and encodes the positives.
pub fn encode_targets(gt: &[GtBox], priors: &[Prior], config: &ModelConfig) -> EncodedTargets {
    let boxes: Vec<BBox> = gt.iter().map(|g| g.bbox).collect();
    let a = match_priors(&boxes, priors, config.match_iou_threshold);
    let mut labels = vec![0; priors.len()];
    let mut locations = vec![[0.0; LOC_DIMS]; priors.len()];
    for (j, m) in a.matched.iter().enumerate() {
        if let Some(g) = *m {
            labels[j] = gt[g].label;
            locations[j] = encode_box(&gt[g], &priors[j], config);
        }
    }
    EncodedTargets {
        labels,
        locations,
        warnings: Vec::new(),
    }
}

/// Convenience: normalize view-pixel objects, then encode.
pub fn encode_objects(objects: &[StereoObject], priors: &[Prior], config: &ModelConfig) -> EncodedTargets {
    let (gt, warnings) = normalize_objects(objects, config);
    let mut t = encode_targets(&gt, priors, config);
    t.warnings = warnings;
    t
}

/// Selects the `count` negatives with the largest background loss. Ties
/// go to the lower index.
pub fn hard_negatives(background_loss: &[f64], positive: &[bool], count: usize) -> Vec<bool> {
    let mut candidates: Vec<usize> = (0..background_loss.len()).filter(|&j| !positive[j]).collect();
    let count = count.min(candidates.len());
    let mut keep = vec![false; background_loss.len()];
    if count == 0 {
        return keep;
    }
    let order = |a: &usize, b: &usize| background_loss[*b].total_cmp(&background_loss[*a]).then(a.cmp(b));
    if count < candidates.len() {
        candidates.select_nth_unstable_by(count - 1, order);
    }
    for &j in &candidates[..count] {
        keep[j] = true;
    }
    keep
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Loss value with its parts and gradients.
#[derive(Debug, Clone)]
pub struct LossOutput<T: Element> {
    pub breakdown: LossBreakdown,
    pub grad_confidences: Tensor<T>,
    pub grad_locations: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    pub num_positive: usize,
    pub num_negative: usize,
}

/// `(CE over positives and mined negatives + SmoothL1 over the six
/// location channels of positives) / N_pos`, with closed-form gradients.
/// With no positives in the batch the loss is zero.
pub fn multibox_disparity_loss<T: Element>(
    confidences: &Tensor<T>,
    locations: &Tensor<T>,
    targets: &[EncodedTargets],
    config: &ModelConfig,
) -> Result<LossOutput<T>, CodecError> {
    let cs = confidences.shape();
    let (n, p, k) = match cs {
        [n, p, k] => (*n, *p, *k),
        _ => {
            return Err(CodecError::Shape {
                what: "confidences",
                expected: vec![targets.len(), 0, config.num_classes()],
                got: cs.to_vec(),
            })
        }
    };
    if n != targets.len() || targets.iter().any(|t| t.labels.len() != p) {
        return Err(CodecError::Shape {
            what: "targets",
            expected: vec![n, p],
            got: vec![targets.len(), targets.first().map_or(0, |t| t.labels.len())],
        });
    }
    if locations.shape() != [n, p, LOC_DIMS] {
        return Err(CodecError::Shape {
            what: "locations",
            expected: vec![n, p, LOC_DIMS],
            got: locations.shape().to_vec(),
        });
    }

    let conf = confidences.data();
    let loc = locations.data();
    let mut gc = vec![0.0f64; conf.len()];
    let mut gl = vec![0.0f64; loc.len()];
    let weights = [1.0, 1.0, 1.0, 1.0, config.disparity_weight, config.disparity_weight];
    let num_pos: usize = targets.iter().map(|t| t.num_positive()).sum();
    let mut out = LossBreakdown {
        num_positive: num_pos,
        ..Default::default()
    };

    let mut probs = vec![0.0; k];
    for (b, t) in targets.iter().enumerate() {
        // log-softmax per prior
        let mut lse = vec![0.0; p];
        for j in 0..p {
            let row = &conf[(b * p + j) * k..(b * p + j + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            lse[j] = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        }
        let positive: Vec<bool> = t.labels.iter().map(|&l| l > 0).collect();
        let pos_here = positive.iter().filter(|&&x| x).count();
        let bg_loss: Vec<f64> = (0..p).map(|j| lse[j] - conf[(b * p + j) * k].as_f64()).collect();
        let count = (config.neg_pos_ratio * pos_here as f64).floor() as usize;
        let negatives = hard_negatives(&bg_loss, &positive, count);
        for j in 0..p {
            if !(positive[j] || negatives[j]) {
                continue;
            }
            if negatives[j] {
                out.num_negative += 1;
            }
            let base = (b * p + j) * k;
            let label = t.labels[j];
            out.classification += lse[j] - conf[base + label].as_f64();
            for c in 0..k {
                probs[c] = (conf[base + c].as_f64() - lse[j]).exp();
            }
            for c in 0..k {
                gc[base + c] = probs[c] - if c == label { 1.0 } else { 0.0 };
            }
            if positive[j] {
                let lb = (b * p + j) * LOC_DIMS;
                for d in 0..LOC_DIMS {
                    let (v, g) = smooth_l1(loc[lb + d].as_f64() - t.locations[j][d]);
                    out.regression += weights[d] * v;
                    gl[lb + d] = weights[d] * g;
                }
            }
        }
    }

    let scale = if num_pos > 0 { 1.0 / num_pos as f64 } else { 0.0 };
    if num_pos == 0 {
        log::warn!("batch has no positive priors; loss is zero");
        out.classification = 0.0;
        out.regression = 0.0;
    }
    out.classification *= scale;
    out.regression *= scale;
    out.total = out.classification + out.regression;
    let to_t = |g: Vec<f64>| g.into_iter().map(|v| T::from_f64(v * scale)).collect::<Vec<T>>();
    Ok(LossOutput {
        breakdown: out,
        grad_confidences: Tensor::new(cs, to_t(gc))?,
        grad_locations: Tensor::new(locations.shape(), to_t(gl))?,
    })
}

/// Records the loss on `g` so [`Graph::backward`] flows through it.
pub fn loss_on_graph<T: Element>(
    g: &mut Graph<T>,
    confidences: Var,
    locations: Var,
    targets: &[EncodedTargets],
    config: &ModelConfig,
) -> Result<(Var, LossBreakdown), CodecError> {
    let out = multibox_disparity_loss(g.value(confidences), g.value(locations), targets, config)?;
    let v = g.precomputed_scalar(
        &[confidences, locations],
        T::from_f64(out.breakdown.total),
        vec![out.grad_confidences, out.grad_locations],
    )?;
    Ok((v, out.breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::toy()
    }

    fn prior(cx: f64, cy: f64, w: f64, h: f64) -> Prior {
        Prior { cx, cy, w, h }
    }

    #[test]
    fn encode_example() {
        let c = cfg();
        let p = prior(0.5, 0.5, 0.2, 0.2);
        let g = GtBox {
            label: 1,
            bbox: BBox::from_center(0.55, 0.5, 0.2, 0.2),
            dx: 0.0,
            dy: 0.0,
        };
        let e = encode_box(&g, &p, &c);
        assert!((e[0] - 2.5).abs() < 1e-12);
        assert!(e[1].abs() < 1e-12 && e[2].abs() < 1e-12);
    }

    #[test]
    fn identical_gt_encodes_to_zero() {
        let c = cfg();
        let p = prior(0.3, 0.6, 0.1, 0.25);
        let g = GtBox {
            label: 1,
            bbox: p.to_bbox(),
            dx: 0.0,
            dy: 0.0,
        };
        for v in encode_box(&g, &p, &c) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn doubled_width_decodes() {
        let c = cfg();
        let p = prior(0.5, 0.5, 0.2, 0.2);
        let d = decode_box(&[0.0, 0.0, 2f64.ln() / 0.2, 0.0, 0.0, 0.0], &p, &c);
        assert!((d.bbox.width() - 0.4 * c.view_width as f64).abs() < 1e-9);
        let z = decode_box(&[0.0; 6], &p, &c);
        assert_eq!(z.dx, 0.0);
        assert!(!decode_box(&[0.0, 0.0, 1e3, 0.0, 0.0, 0.0], &p, &c)
            .bbox
            .width()
            .is_infinite());
        assert!(decode_box(&[0.0, 0.0, 1e3, 0.0, 0.0, 0.0], &p, &c).clamped);
    }

    #[test]
    fn empty_gt_is_all_background() {
        let priors = crate::model::generate_priors(&cfg());
        let t = encode_targets(&[], &priors, &cfg());
        assert_eq!(t.num_positive(), 0);
    }

    #[test]
    fn gt_equal_to_prior_is_positive() {
        let priors = crate::model::generate_priors(&cfg());
        let g = GtBox {
            label: 2,
            bbox: priors[17].to_bbox(),
            dx: 3.0,
            dy: 0.0,
        };
        let t = encode_targets(&[g], &priors, &cfg());
        assert_eq!(t.labels[17], 2);
    }

    #[test]
    fn uniform_scores_give_ln_k() {
        let c = cfg();
        let p = 12;
        let k = c.num_classes();
        let mut labels = vec![0; p];
        labels[3] = 1;
        let t = EncodedTargets {
            labels,
            locations: vec![[0.0; 6]; p],
            warnings: vec![],
        };
        let conf = Tensor::<f64>::zeros(&[1, p, k]);
        let loc = Tensor::<f64>::zeros(&[1, p, 6]);
        let out = multibox_disparity_loss(&conf, &loc, &[t], &c).unwrap();
        // one positive + three negatives, each ln K, divided by one positive
        assert!((out.breakdown.classification - 4.0 * (k as f64).ln()).abs() < 1e-12);
        assert_eq!(out.breakdown.regression, 0.0);
        assert_eq!(out.breakdown.num_negative, 3);
    }

    #[test]
    fn no_positives_gives_zero() {
        let c = cfg();
        let t = EncodedTargets {
            labels: vec![0; 4],
            locations: vec![[0.0; 6]; 4],
            warnings: vec![],
        };
        let conf = Tensor::<f32>::full(&[1, 4, 5], 0.3);
        let loc = Tensor::<f32>::full(&[1, 4, 6], 0.3);
        let out = multibox_disparity_loss(&conf, &loc, &[t], &c).unwrap();
        assert_eq!(out.breakdown.total, 0.0);
        assert!(out.grad_confidences.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hard_negative_ties_prefer_lower_index() {
        let keep = hard_negatives(&[1.0, 2.0, 2.0, 0.5, 2.0], &[false, false, false, false, true], 2);
        assert_eq!(keep, vec![false, true, true, false, false]);
    }
}
