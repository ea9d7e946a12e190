//! Exhaustive reference implementations checked against the library on
//! random small instances. Coordinates sit on an integer grid so overlaps are
//! exact and ties actually occur.

use odssd_core::codec::{hard_negatives, match_priors};
use odssd_core::eval::{bbox_percentile_disparity, match_detections, DisparityMap};
use odssd_core::model::Prior;
use odssd_core::postprocess::nms;
use odssd_core::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::rng;

pub const INSTANCES: usize = 1000;

/// Outcome of one oracle suite.
#[derive(Debug)]
pub struct OracleRun {
    pub name: &'static str,
    pub instances: usize,
    pub mismatches: usize,
}

impl OracleRun {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.mismatches == 0
    }
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let h = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = w * h;
    let union = (a.xmax - a.xmin) * (a.ymax - a.ymin) + (b.xmax - b.xmin) * (b.ymax - b.ymin) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn grid_box(r: &mut ChaCha8Rng, extent: i32) -> BBox {
    let x0 = r.random_range(0..extent - 1);
    let y0 = r.random_range(0..extent - 1);
    let x1 = r.random_range(x0 + 1..=extent);
    let y1 = r.random_range(y0 + 1..=extent);
    BBox {
        xmin: x0 as f64,
        ymin: y0 as f64,
        xmax: x1 as f64,
        ymax: y1 as f64,
    }
}

/// Greedy suppression by definition: walk boxes best-first and keep one
/// when no kept box overlaps it beyond the threshold.
fn nms_oracle(boxes: &[BBox], scores: &[f64], thr: f64, top_k: usize) -> Vec<usize> {
    let n = boxes.len();
    let mut order: Vec<usize> = (0..n).collect();
    // selection sort by (score desc, index asc)
    for i in 0..n {
        let mut best = i;
        for j in i + 1..n {
            let (a, b) = (order[j], order[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                best = j;
            }
        }
        order.swap(i, best);
    }
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| overlap(&boxes[k], &boxes[i]) <= thr) {
            kept.push(i);
        }
    }
    kept.truncate(top_k);
    kept
}

pub fn nms_suite() -> OracleRun {
    let mut r = rng(101);
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let n = r.random_range(0..14);
        let boxes: Vec<BBox> = (0..n).map(|_| grid_box(&mut r, 10)).collect();
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 / 5.0).collect();
        let thr = [0.0, 0.3, 0.45, 0.5, 0.7][r.random_range(0..5)];
        let top_k = r.random_range(0..16);
        if nms(&boxes, &scores, thr, top_k) != nms_oracle(&boxes, &scores, thr, top_k) {
            mismatches += 1;
        }
    }
    OracleRun {
        name: "nms",
        instances: INSTANCES,
        mismatches,
    }
}

/// Direct O(P·G) matcher: threshold pass over the overlap matrix, then each
/// ground truth in turn forces its best prior.
fn match_oracle(gt: &[BBox], priors: &[BBox], thr: f64) -> Vec<Option<usize>> {
    let m: Vec<Vec<f64>> = priors
        .iter()
        .map(|p| gt.iter().map(|g| overlap(p, g)).collect())
        .collect();
    let mut out = vec![None; priors.len()];
    for (j, row) in m.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in row.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= thr {
                out[j] = Some(g);
            }
        }
    }
    for g in 0..gt.len() {
        let mut best: Option<(usize, f64)> = None;
        for (j, row) in m.iter().enumerate() {
            if best.is_none_or(|(_, b)| row[g] > b) {
                best = Some((j, row[g]));
            }
        }
        if let Some((j, v)) = best {
            if v > 0.0 {
                out[j] = Some(g);
            }
        }
    }
    out
}

pub fn matching_suite() -> OracleRun {
    let mut r = rng(202);
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let np = r.random_range(1..12);
        let ng = r.random_range(0..5);
        let prior_boxes: Vec<BBox> = (0..np).map(|_| grid_box(&mut r, 8)).collect();
        let priors: Vec<Prior> = prior_boxes
            .iter()
            .map(|b| Prior {
                cx: (b.xmin + b.xmax) / 2.0,
                cy: (b.ymin + b.ymax) / 2.0,
                w: b.xmax - b.xmin,
                h: b.ymax - b.ymin,
            })
            .collect();
        let gt: Vec<BBox> = (0..ng).map(|_| grid_box(&mut r, 8)).collect();
        let thr = [0.3, 0.5, 0.7][r.random_range(0..3)];
        let got = match_priors(&gt, &priors, thr).matched;
        if got != match_oracle(&gt, &prior_boxes, thr) {
            mismatches += 1;
        }
    }
    OracleRun {
        name: "prior matching",
        instances: INSTANCES,
        mismatches,
    }
}

pub fn mining_suite() -> OracleRun {
    let mut r = rng(303);
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let n = r.random_range(0..30);
        let loss: Vec<f64> = (0..n).map(|_| r.random_range(0..8) as f64 * 0.25).collect();
        let positive: Vec<bool> = (0..n).map(|_| r.random_bool(0.2)).collect();
        let count = r.random_range(0..=n + 2);
        let mut negatives: Vec<usize> = (0..n).filter(|&j| !positive[j]).collect();
        negatives.sort_by(|&a, &b| loss[b].partial_cmp(&loss[a]).unwrap().then(a.cmp(&b)));
        let mut want = vec![false; n];
        for &j in negatives.iter().take(count) {
            want[j] = true;
        }
        if hard_negatives(&loss, &positive, count) != want {
            mismatches += 1;
        }
    }
    OracleRun {
        name: "hard-negative mining",
        instances: INSTANCES,
        mismatches,
    }
}

pub fn percentile_suite() -> OracleRun {
    let mut r = rng(404);
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let (w, h) = (r.random_range(1..9usize), r.random_range(1..9usize));
        let raw: Vec<u16> = (0..w * h)
            .map(|_| if r.random_bool(0.3) { 0 } else { r.random_range(1..5000) })
            .collect();
        let map = DisparityMap::from_raw(w, h, &raw);
        let b = BBox {
            xmin: r.random_range(-2.0..w as f64),
            ymin: r.random_range(-2.0..h as f64),
            xmax: 0.0,
            ymax: 0.0,
        };
        let b = BBox {
            xmax: b.xmin + r.random_range(0.1..6.0),
            ymax: b.ymin + r.random_range(0.1..6.0),
            ..b
        };
        let q: u32 = r.random_range(1..=100);
        let mut vals: Vec<f64> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let inside = x as f64 >= b.xmin.floor()
                    && (x as f64) < b.xmax.ceil()
                    && y as f64 >= b.ymin.floor()
                    && (y as f64) < b.ymax.ceil();
                if inside && raw[y * w + x] != 0 {
                    vals.push(raw[y * w + x] as f64 / 256.0);
                }
            }
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = vals.len() as u32;
        let want = (n > 0).then(|| vals[((q * n).div_ceil(100)).max(1) as usize - 1]);
        let got = bbox_percentile_disparity(&map, &b, q as f64).unwrap();
        if got != want {
            mismatches += 1;
        }
    }
    OracleRun {
        name: "percentile in bbox",
        instances: INSTANCES,
        mismatches,
    }
}

/// Greedy PR matching by definition, returning (tp, fp, fn, pairs).
fn pr_oracle(dets: &[(BBox, f64)], gts: &[BBox], thr: f64) -> (usize, usize, usize, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap().then(a.cmp(&b)));
    let mut free: Vec<bool> = vec![true; gts.len()];
    let mut pairs = Vec::new();
    for d in order {
        let cands: Vec<(usize, f64)> = (0..gts.len())
            .filter(|&g| free[g])
            .map(|g| (g, overlap(&dets[d].0, &gts[g])))
            .filter(|&(_, v)| v >= thr)
            .collect();
        let best = cands.iter().copied().reduce(|a, b| if b.1 > a.1 { b } else { a });
        if let Some((g, _)) = best {
            free[g] = false;
            pairs.push((d, g));
        }
    }
    let tp = pairs.len();
    (tp, dets.len() - tp, gts.len() - tp, pairs)
}

pub fn pr_suite() -> OracleRun {
    let mut r = rng(505);
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let nd = r.random_range(0..8);
        let ng = r.random_range(0..6);
        let dets: Vec<(BBox, f64)> = (0..nd)
            .map(|_| (grid_box(&mut r, 8), r.random_range(0..4) as f64 / 4.0))
            .collect();
        let gts: Vec<BBox> = (0..ng).map(|_| grid_box(&mut r, 8)).collect();
        let got = match_detections(&dets, &gts, 0.5);
        let want = pr_oracle(&dets, &gts, 0.5);
        if (got.true_positives, got.false_positives, got.false_negatives, got.pairs) != want {
            mismatches += 1;
        }
    }
    OracleRun {
        name: "PR matching",
        instances: INSTANCES,
        mismatches,
    }
}

pub fn all() -> Vec<OracleRun> {
    vec![
        nms_suite(),
        matching_suite(),
        mining_suite(),
        percentile_suite(),
        pr_suite(),
    ]
}
