//! Stereo object detection with per-object disparity.
//!
//! A single-shot detector runs on a stacked stereo pair (left view on top,
//! right view below) and regresses, for every prior box, the left-view box
//! plus the object's horizontal and vertical disparity. Everything needed
//! around it lives here too: the annotation format, the tensor engine,
//! target encoding and loss, decoding, evaluation, and a synthetic scene
//! generator for desk-scale training.

pub mod annotation;
pub mod codec;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod postprocess;
pub mod synth;
pub mod tensor;

pub use geometry::{iou, object_disparity, BBox, ObjectDisparity, StereoObject};
pub use tensor::{Graph, Tensor, Var};
