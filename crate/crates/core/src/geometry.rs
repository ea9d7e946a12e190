//! Boxes, overlap, and the object-disparity rule.
//!
//! All coordinates are real-valued pixels in the frame of a single view
//! (left or right), origin at the top-left corner.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),
    #[error("inverted box {which}: ({xmin}, {ymin}, {xmax}, {ymax})")]
    Inverted {
        which: &'static str,
        xmin: f64,
        ymin: f64,
        xmax: f64,
        ymax: f64,
    },
    #[error("{which} ({xmin}, {ymin}, {xmax}, {ymax}) lies outside the {view_w}x{view_h} view")]
    OutOfView {
        which: &'static str,
        xmin: f64,
        ymin: f64,
        xmax: f64,
        ymax: f64,
        view_w: f64,
        view_h: f64,
    },
    #[error("view size must be positive, got {0}x{1}")]
    BadView(f64, f64),
}

/// Axis-aligned box in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite or inverted coordinates.
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, GeometryError> {
        let b = BBox { xmin, ymin, xmax, ymax };
        b.validate("box")?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            xmin: cx - w / 2.0,
            ymin: cy - h / 2.0,
            xmax: cx + w / 2.0,
            ymax: cy + h / 2.0,
        }
    }

    pub fn validate(&self, which: &'static str) -> Result<(), GeometryError> {
        if ![self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(GeometryError::NonFinite(which));
        }
        if self.xmin > self.xmax || self.ymin > self.ymax {
            return Err(GeometryError::Inverted {
                which,
                xmin: self.xmin,
                ymin: self.ymin,
                xmax: self.xmax,
                ymax: self.ymax,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            xmin: self.xmin + dx,
            ymin: self.ymin + dy,
            xmax: self.xmax + dx,
            ymax: self.ymax + dy,
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            xmin: self.xmin * sx,
            ymin: self.ymin * sy,
            xmax: self.xmax * sx,
            ymax: self.ymax * sy,
        }
    }

    /// Intersects the box with `[0, w] x [0, h]`.
    pub fn clamp_to(&self, w: f64, h: f64) -> BBox {
        BBox {
            xmin: self.xmin.clamp(0.0, w),
            ymin: self.ymin.clamp(0.0, h),
            xmax: self.xmax.clamp(0.0, w),
            ymax: self.ymax.clamp(0.0, h),
        }
    }

    pub fn within(&self, w: f64, h: f64) -> bool {
        self.xmin >= 0.0 && self.ymin >= 0.0 && self.xmax <= w && self.ymax <= h
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let ih = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

/// Horizontal and vertical displacement of an object between views, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectDisparity {
    pub dx: f64,
    pub dy: f64,
}

impl ObjectDisparity {
    pub fn new(dx: f64, dy: f64) -> Self {
        ObjectDisparity { dx, dy }
    }

    /// Largest per-axis difference to `other`.
    pub fn max_abs_diff(&self, other: &ObjectDisparity) -> f64 {
        (self.dx - other.dx).abs().max((self.dy - other.dy).abs())
    }
}

/// A labelled object seen in both views.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoObject {
    pub label: String,
    pub left_box: BBox,
    pub right_box: BBox,
    pub disparity: ObjectDisparity,
}

impl StereoObject {
    /// Builds an object whose disparity is computed from its boxes.
    pub fn from_boxes(
        label: impl Into<String>,
        left_box: BBox,
        right_box: BBox,
        view_w: f64,
        view_h: f64,
    ) -> Result<Self, GeometryError> {
        let disparity = object_disparity(&left_box, &right_box, view_w, view_h)?;
        Ok(StereoObject {
            label: label.into(),
            left_box,
            right_box,
            disparity,
        })
    }
}

/// Overlap ratio of two boxes; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// One axis of the disparity rule. A box touching the low edge is compared
/// by its high edge, a box touching the high edge by its low edge, and
/// anything else by its center. The low-edge test runs first.
fn axis_disparity(lmin: f64, lmax: f64, rmin: f64, rmax: f64, extent: f64) -> f64 {
    if lmin == 0.0 || rmin == 0.0 {
        lmax - rmax
    } else if lmax == extent || rmax == extent {
        lmin - rmin
    } else {
        (lmin + lmax) / 2.0 - (rmin + rmax) / 2.0
    }
}

/// Disparity between the left-view box and the right-view box of one object.
///
/// Edge tests use exact equality, so boxes should be clamped to the view
/// (see [`BBox::clamp_to`]) before calling.
pub fn object_disparity(lbox: &BBox, rbox: &BBox, view_w: f64, view_h: f64) -> Result<ObjectDisparity, GeometryError> {
    if !(view_w.is_finite() && view_h.is_finite() && view_w > 0.0 && view_h > 0.0) {
        return Err(GeometryError::BadView(view_w, view_h));
    }
    for (which, b) in [("left box", lbox), ("right box", rbox)] {
        b.validate(which)?;
        if !b.within(view_w, view_h) {
            return Err(GeometryError::OutOfView {
                which,
                xmin: b.xmin,
                ymin: b.ymin,
                xmax: b.xmax,
                ymax: b.ymax,
                view_w,
                view_h,
            });
        }
    }
    Ok(ObjectDisparity {
        dx: axis_disparity(lbox.xmin, lbox.xmax, rbox.xmin, rbox.xmax, view_w),
        dy: axis_disparity(lbox.ymin, lbox.ymax, rbox.ymin, rbox.ymax, view_h),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn annotated_car_example() {
        let d = object_disparity(&b(325., 192., 416., 261.), &b(297., 194., 388., 263.), 1242., 375.).unwrap();
        assert_eq!(d, ObjectDisparity::new(28.0, -2.0));
    }

    #[test]
    fn identical_boxes_have_zero_disparity() {
        let a = b(10., 20., 30., 40.);
        assert_eq!(
            object_disparity(&a, &a, 640., 320.).unwrap(),
            ObjectDisparity::default()
        );
    }

    #[test]
    fn left_edge_branch() {
        let d = object_disparity(&b(0., 50., 200., 150.), &b(0., 50., 180., 150.), 640., 320.).unwrap();
        assert_eq!(d.dx, 20.0);
        assert_eq!(d.dy, 0.0);
    }

    #[test]
    fn top_edge_branch() {
        let d = object_disparity(&b(100., 0., 200., 80.), &b(80., 0., 180., 80.), 640., 320.).unwrap();
        assert_eq!(d.dy, 0.0);
        assert_eq!(d.dx, 20.0);
    }

    #[test]
    fn full_width_box_takes_low_edge_branch() {
        let d = object_disparity(&b(0., 10., 640., 20.), &b(5., 10., 600., 20.), 640., 320.).unwrap();
        assert_eq!(d.dx, 40.0);
    }

    #[test]
    fn right_edge_branch() {
        let d = object_disparity(&b(500., 10., 640., 20.), &b(470., 10., 600., 20.), 640., 320.).unwrap();
        assert_eq!(d.dx, 30.0);
    }

    #[test]
    fn rejects_bad_input() {
        let good = b(1., 1., 2., 2.);
        let outside = BBox {
            xmin: 1.,
            ymin: 1.,
            xmax: 700.,
            ymax: 2.,
        };
        assert!(matches!(
            object_disparity(&outside, &good, 640., 320.),
            Err(GeometryError::OutOfView { .. })
        ));
        let nan = BBox { xmin: f64::NAN, ..good };
        assert!(matches!(
            object_disparity(&good, &nan, 640., 320.),
            Err(GeometryError::NonFinite(_))
        ));
        assert!(object_disparity(&good, &good, 0., 320.).is_err());
        assert!(BBox::new(3., 0., 1., 1.).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0., 0., 2., 2.);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5., 5., 6., 6.)), 0.0);
        assert!((iou(&a, &b(1., 1., 3., 3.)) - 1.0 / 7.0).abs() < 1e-12);
        let point = b(1., 1., 1., 1.);
        assert_eq!(iou(&point, &point), 0.0);
    }

    fn arb_box(w: f64, h: f64) -> impl Strategy<Value = BBox> {
        (0.0..w, 0.0..h, 0.0..w, 0.0..h).prop_map(|(a, b, c, d)| BBox {
            xmin: a.min(c),
            ymin: b.min(d),
            xmax: a.max(c),
            ymax: b.max(d),
        })
    }

    proptest! {
        #[test]
        fn swap_negates_interior_disparity(l in arb_box(640., 320.), r in arb_box(640., 320.)) {
            let edge = |bx: &BBox| bx.xmin == 0.0 || bx.ymin == 0.0 || bx.xmax == 640.0 || bx.ymax == 320.0;
            prop_assume!(!edge(&l) && !edge(&r));
            let fwd = object_disparity(&l, &r, 640., 320.).unwrap();
            let rev = object_disparity(&r, &l, 640., 320.).unwrap();
            prop_assert_eq!(fwd.dx, -rev.dx);
            prop_assert_eq!(fwd.dy, -rev.dy);
        }

        #[test]
        fn single_pixel_boxes_give_pixel_disparity(
            lx in 1.0..600.0f64, ly in 1.0..300.0f64, rx in 1.0..600.0f64, ry in 1.0..300.0f64,
        ) {
            let l = BBox { xmin: lx, ymin: ly, xmax: lx, ymax: ly };
            let r = BBox { xmin: rx, ymin: ry, xmax: rx, ymax: ry };
            let d = object_disparity(&l, &r, 640., 320.).unwrap();
            prop_assert!((d.dx - (lx - rx)).abs() < 1e-9);
            prop_assert!((d.dy - (ly - ry)).abs() < 1e-9);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(50., 50.), c in arb_box(50., 50.)) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
            if a.area() > 0.0 {
                prop_assert_eq!(iou(&a, &a), 1.0);
            }
            if v == 1.0 {
                prop_assert!((a.xmin - c.xmin).abs() < 1e-9 && (a.xmax - c.xmax).abs() < 1e-9);
            }
        }
    }
}
