use std::time::{Duration, Instant};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{render, shifted_layout, Scene};
use crate::codec::{encode_objects, loss_on_graph, multibox_disparity_loss, CodecError, EncodedTargets};
use crate::geometry::{BBox, ObjectDisparity, StereoObject};
use crate::model::{
    build_model, generate_priors, load_weights, save_weights, Model, ModelConfig, ModelError, Precision, Prior,
};
use crate::postprocess::{detect, Detection};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("no training scenes")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Heavy-ball momentum: `v = μv + g + λw; w -= lr·v`.
    Sgd { momentum: f64 },
    /// Adam with plain L2 (`λw` added to the gradient).
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// Draw a random mirror, vertical flip and channel order per sample
    /// per step. Each keeps the disparity labels consistent.
    pub augment: bool,
    /// Seeds weight init, the per-epoch shuffle and augmentation.
    pub seed: u64,
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            model: ModelConfig::toy(),
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            weight_decay: 1e-3,
            lr_milestones: vec![35, 45],
            lr_gamma: 0.1,
            clip_grad_norm: Some(10.0),
            augment: true,
            seed: 7,
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * self.lr_gamma.powi(steps as i32)
    }
}

/// Per-epoch means over batches.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Mean batch loss of the initial weights over the training set.
    pub initial_loss: f64,
    /// Mean batch loss per completed epoch.
    pub loss_curve: Vec<f64>,
    pub epochs: Vec<EpochStats>,
    /// fp32 weights of the last completed epoch.
    pub checkpoint: Vec<u8>,
    /// Set when training stopped early on a non-finite loss.
    pub aborted: Option<String>,
    pub elapsed: Duration,
}

/// Stacks images into an (N, 3, H, W) tensor scaled to roughly unit range.
pub fn image_to_tensor(images: &[&RgbImage]) -> Tensor<f32> {
    let (w, h) = images.first().map_or((0, 0), |i| i.dimensions());
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; images.len() * 3 * h * w];
    for (n, img) in images.iter().enumerate() {
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[((n * 3 + c) * h + y as usize) * w + x as usize] = (p.0[c] as f32 - 127.5) / 64.0;
            }
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data).expect("buffer sized from shape")
}

struct Sample {
    image: RgbImage,
    objects: Vec<StereoObject>,
    targets: EncodedTargets,
}

fn batch_input(samples: &[Sample], idx: &[usize]) -> (Tensor<f32>, Vec<EncodedTargets>) {
    let imgs: Vec<&RgbImage> = idx.iter().map(|&i| &samples[i].image).collect();
    (
        image_to_tensor(&imgs),
        idx.iter().map(|&i| samples[i].targets.clone()).collect(),
    )
}

/// Mirrors both views and swaps them, which keeps dx and negates dy;
/// optionally flips both views upside down (negates dy); permutes channels.
pub fn augment_pair(
    stacked: &RgbImage,
    objects: &[StereoObject],
    mirror: bool,
    flip_vertical: bool,
    channels: [usize; 3],
) -> (RgbImage, Vec<StereoObject>) {
    let (w, h2) = stacked.dimensions();
    let h = h2 / 2;
    let out = RgbImage::from_fn(w, h2, |x, y| {
        let (view, vy) = (y / h, y % h);
        let view = if mirror { 1 - view } else { view };
        let sx = if mirror { w - 1 - x } else { x };
        let sy = if flip_vertical { h - 1 - vy } else { vy };
        let p = stacked.get_pixel(sx, view * h + sy).0;
        image::Rgb([p[channels[0]], p[channels[1]], p[channels[2]]])
    });
    let (fw, fh) = (w as f64, h as f64);
    let tf = |b: &BBox| {
        let b = if mirror {
            BBox {
                xmin: fw - b.xmax,
                xmax: fw - b.xmin,
                ..*b
            }
        } else {
            *b
        };
        if flip_vertical {
            BBox {
                ymin: fh - b.ymax,
                ymax: fh - b.ymin,
                ..b
            }
        } else {
            b
        }
    };
    let objects = objects
        .iter()
        .map(|o| {
            let (l, r) = if mirror {
                (&o.right_box, &o.left_box)
            } else {
                (&o.left_box, &o.right_box)
            };
            let sign = if mirror != flip_vertical { -1.0 } else { 1.0 };
            StereoObject {
                label: o.label.clone(),
                left_box: tf(l),
                right_box: tf(r),
                disparity: ObjectDisparity::new(o.disparity.dx, sign * o.disparity.dy),
            }
        })
        .collect();
    (out, objects)
}

const CHANNEL_ORDERS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn augmented_batch(
    samples: &[Sample],
    idx: &[usize],
    rng: &mut ChaCha8Rng,
    priors: &[Prior],
    config: &ModelConfig,
) -> (Tensor<f32>, Vec<EncodedTargets>) {
    let mut imgs = Vec::with_capacity(idx.len());
    let mut targets = Vec::with_capacity(idx.len());
    for &i in idx {
        let (mirror, flip, order): (bool, bool, usize) = (rng.random(), rng.random(), rng.random_range(0..6));
        let (img, objects) = augment_pair(
            &samples[i].image,
            &samples[i].objects,
            mirror,
            flip,
            CHANNEL_ORDERS[order],
        );
        targets.push(encode_objects(&objects, priors, config));
        imgs.push(img);
    }
    let refs: Vec<&RgbImage> = imgs.iter().collect();
    (image_to_tensor(&refs), targets)
}

fn dataset_loss(model: &Model<f32>, samples: &[Sample], batch: usize) -> Result<f64, TrainError> {
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    let mut count = 0;
    for chunk in order.chunks(batch) {
        let (x, t) = batch_input(samples, chunk);
        let (conf, loc) = model.forward(&x)?;
        total += multibox_disparity_loss(&conf, &loc, &t, model.config())?
            .breakdown
            .total;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Minibatch descent over the multibox + disparity loss. `on_epoch` sees
/// each completed epoch.
pub fn train_toy(
    config: &TrainConfig,
    scenes: &[Scene],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::Empty);
    }
    let start = Instant::now();
    let priors = generate_priors(&config.model);
    let samples: Vec<Sample> = scenes
        .iter()
        .map(|s| {
            let objects = s.objects();
            Sample {
                image: s.stacked(),
                targets: encode_objects(&objects, &priors, &config.model),
                objects,
            }
        })
        .collect();
    let mut model = build_model::<f32>(&config.model, config.seed)?;
    let initial_loss = dataset_loss(&model, &samples, config.batch_size)?;
    let mut checkpoint = save_weights(&model, Precision::Fp32);
    let mut velocity: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
    let mut second: Vec<Vec<f32>> = match config.optimizer {
        Optimizer::Adam { .. } => model.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        Optimizer::Sgd { .. } => Vec::new(),
    };
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa06);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut aborted = None;

    'epochs: for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch) as f32;
        order.shuffle(&mut rng);
        let mut st = EpochStats {
            epoch,
            learning_rate: lr as f64,
            ..Default::default()
        };
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let (x, targets) = if config.augment {
                augmented_batch(&samples, chunk, &mut aug_rng, &priors, &config.model)
            } else {
                batch_input(&samples, chunk)
            };
            let mut g = Graph::new();
            let xv = g.input(x);
            let pv = model.register_params(&mut g);
            let out = model.forward_with(&mut g, xv, &pv)?;
            let (loss, parts) = loss_on_graph(&mut g, out.confidences, out.locations, &targets, &config.model)?;
            if !parts.total.is_finite() {
                aborted = Some(format!("non-finite loss at epoch {epoch}"));
                break 'epochs;
            }
            g.backward(loss).map_err(ModelError::from)?;
            let grads: Vec<&[f32]> = pv.iter().map(|&v| g.grad(v).expect("parameter gradient")).collect();
            let norm = grads
                .iter()
                .flat_map(|gr| gr.iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                aborted = Some(format!("non-finite gradient at epoch {epoch}"));
                break 'epochs;
            }
            let clip = match config.clip_grad_norm {
                Some(c) if norm > c => (c / norm) as f32,
                _ => 1.0,
            };
            let wd = config.weight_decay as f32;
            step += 1;
            match config.optimizer {
                Optimizer::Sgd { momentum } => {
                    let mu = momentum as f32;
                    for ((p, v), gr) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                        for ((w, vi), &gi) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(gr.iter()) {
                            *vi = mu * *vi + gi * clip + wd * *w;
                            *w -= lr * *vi;
                        }
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
                    let c1 = 1.0 - b1.powi(step);
                    let c2 = 1.0 - b2.powi(step);
                    for (((p, m), v), gr) in model
                        .params_mut()
                        .iter_mut()
                        .zip(&mut velocity)
                        .zip(&mut second)
                        .zip(&grads)
                    {
                        for (((w, mi), vi), &gi) in p
                            .tensor
                            .data_mut()
                            .iter_mut()
                            .zip(m.iter_mut())
                            .zip(v.iter_mut())
                            .zip(gr.iter())
                        {
                            let g = gi * clip + wd * *w;
                            *mi = b1 * *mi + (1.0 - b1) * g;
                            *vi = b2 * *vi + (1.0 - b2) * g * g;
                            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        }
                    }
                }
            }
            st.loss += parts.total;
            st.classification += parts.classification;
            st.regression += parts.regression;
            st.grad_norm += norm;
            batches += 1;
        }
        let b = batches as f64;
        st.loss /= b;
        st.classification /= b;
        st.regression /= b;
        st.grad_norm /= b;
        loss_curve.push(st.loss);
        epochs.push(st);
        checkpoint = save_weights(&model, Precision::Fp32);
        on_epoch(&st);
    }
    if aborted.is_some() {
        log::warn!("training aborted; restoring last good checkpoint");
        model = load_weights::<f32>(&checkpoint)?.0;
    }
    Ok(TrainOutcome {
        model,
        initial_loss,
        loss_curve,
        epochs,
        checkpoint,
        aborted,
        elapsed: start.elapsed(),
    })
}

/// Detections for one scene.
pub fn predict(model: &Model<f32>, priors: &[Prior], scene: &Scene) -> Result<Vec<Detection>, TrainError> {
    let stacked = scene.stacked();
    let x = image_to_tensor(&[&stacked]);
    let (conf, loc) = model.forward(&x)?;
    Ok(detect(&conf, &loc, priors, model.config())?.remove(0))
}

fn best_match(dets: &[Detection], target: &BBox) -> Option<Detection> {
    dets.iter()
        .filter(|d| d.left_box.iou(target) >= 0.5)
        .max_by(|a, b| a.left_box.iou(target).total_cmp(&b.left_box.iou(target)))
        .cloned()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftResult {
    pub true_dx: f64,
    pub shift: i32,
    pub before: Option<Detection>,
    pub after: Option<Detection>,
}

impl ShiftResult {
    /// Change in predicted dx, if the object was found both times.
    pub fn dx_change(&self) -> Option<f64> {
        Some(self.after.as_ref()?.dx - self.before.as_ref()?.dx)
    }

    /// Distance between the left-box centers of the two predictions.
    pub fn left_center_drift(&self) -> Option<f64> {
        let (a, b) = (
            self.before.as_ref()?.left_box.center(),
            self.after.as_ref()?.left_box.center(),
        );
        Some(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
    }
}

/// Predicts `object` of `scene`, then re-renders the right view with its
/// disparity increased by `shift` and predicts again.
pub fn shift_object_test(
    model: &Model<f32>,
    priors: &[Prior],
    scene: &Scene,
    object: usize,
    shift: i32,
) -> Result<ShiftResult, TrainError> {
    let target = scene.layout.objects[object].left;
    let before = best_match(&predict(model, priors, scene)?, &target);
    let shifted = render(&shifted_layout(&scene.layout, object, shift));
    let after = best_match(&predict(model, priors, &shifted)?, &target);
    Ok(ShiftResult {
        true_dx: scene.layout.objects[object].dx as f64,
        shift,
        before,
        after,
    })
}
