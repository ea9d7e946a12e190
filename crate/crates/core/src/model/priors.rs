use super::{tap_grid, ModelConfig};
use crate::geometry::BBox;
use crate::tensor::kernels::conv_out_dim;

/// Center-form anchor in normalized left-view coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Prior {
    /// Corner form in normalized coordinates.
    pub fn to_bbox(&self) -> BBox {
        BBox {
            xmin: self.cx - self.w / 2.0,
            ymin: self.cy - self.h / 2.0,
            xmax: self.cx + self.w / 2.0,
            ymax: self.cy + self.h / 2.0,
        }
    }
}

/// (height, width) of each head's feature map.
pub fn head_grids(config: &ModelConfig) -> Vec<(usize, usize)> {
    let (th, tw) = tap_grid(config);
    let mut grids = vec![(th / 2, tw)];
    let (mut h, mut w) = (th / 2, tw);
    for _ in 0..3 {
        h = conv_out_dim(h, 3, 2, 1).unwrap_or(1);
        w = conv_out_dim(w, 3, 2, 1).unwrap_or(1);
        grids.push((h, w));
    }
    grids
}

/// Head-major, row-major within a head, ratio-major within a cell.
pub fn generate_priors(config: &ModelConfig) -> Vec<Prior> {
    let grids = head_grids(config);
    let n = grids.len();
    let mut out = Vec::with_capacity(grids.iter().map(|(h, w)| h * w).sum::<usize>() * config.priors_per_cell);
    for (k, &(gh, gw)) in grids.iter().enumerate() {
        let s = config.scale(k, n);
        let s_next = config.scale(k + 1, n);
        let mut shapes = vec![(s, s), ((s * s_next).sqrt(), (s * s_next).sqrt())];
        for &ar in &config.aspect_ratios {
            let r = ar.sqrt();
            shapes.push((s * r, s / r));
            shapes.push((s / r, s * r));
        }
        for i in 0..gh {
            for j in 0..gw {
                let cx = (j as f64 + 0.5) / gw as f64;
                let cy = (i as f64 + 0.5) / gh as f64;
                for &(w, h) in &shapes {
                    out.push(Prior {
                        cx: cx.clamp(0.0, 1.0),
                        cy: cy.clamp(0.0, 1.0),
                        w: w.clamp(0.0, 1.0),
                        h: h.clamp(0.0, 1.0),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_for_both_resolutions() {
        assert_eq!(
            head_grids(&ModelConfig::od_ssd_640()),
            vec![(20, 40), (10, 20), (5, 10), (3, 5)]
        );
        assert_eq!(
            head_grids(&ModelConfig::od_ssd_320()),
            vec![(10, 20), (5, 10), (3, 5), (2, 3)]
        );
    }

    #[test]
    fn counts_and_first_cell() {
        let p = generate_priors(&ModelConfig::od_ssd_640());
        assert_eq!(p.len(), 6390);
        assert_eq!(generate_priors(&ModelConfig::od_ssd_320()).len(), 1626);
        assert_eq!(generate_priors(&ModelConfig::toy()).len(), 438);
        assert!((p[0].cx - 0.5 / 40.0).abs() < 1e-15);
        assert!((p[0].cy - 0.5 / 20.0).abs() < 1e-15);
        assert!((p[0].w - 0.1).abs() < 1e-15);
        // ratio 2 prior is twice as wide as tall
        assert!((p[2].w / p[2].h - 2.0).abs() < 1e-12);
        assert!((p[3].h / p[3].w - 2.0).abs() < 1e-12);
        for q in &p {
            for v in [q.cx, q.cy, q.w, q.h] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
