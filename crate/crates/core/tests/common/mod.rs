#![allow(dead_code)]

pub mod oracles;

use odssd_core::codec::{encode_objects, loss_on_graph, CodecError, EncodedTargets};
use odssd_core::model::{build_model, generate_priors, Model, ModelConfig};
use odssd_core::synth::{generate_scene, SceneSpec};
use odssd_core::tensor::{ConvParams, GradCheck, GradCheckReport, Graph, PoolParams, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values spread apart so max-pool windows have no near-ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, v).unwrap()
}

/// One gradient check per differentiable operator, at tiny shapes.
pub fn operator_checks() -> Vec<(&'static str, GradCheckReport)> {
    let gc = GradCheck::default();
    let mut r = rng(17);
    let mut out = Vec::new();

    let x = random(&mut r, &[2, 3, 6, 5]);
    let w = random(&mut r, &[4, 3, 3, 3]);
    let b = random(&mut r, &[4]);
    out.push((
        "conv2d",
        gc.run(
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvParams::new(2, 1, 1)),
            &[x.clone(), w, b],
        )
        .unwrap(),
    ));

    let w1 = random(&mut r, &[5, 3, 1, 1]);
    out.push((
        "conv2d_1x1",
        gc.run(
            |g, v| g.conv2d(v[0], v[1], None, ConvParams::default()),
            &[x.clone(), w1],
        )
        .unwrap(),
    ));

    let dw = random(&mut r, &[3, 1, 3, 3]);
    let db = random(&mut r, &[3]);
    out.push((
        "conv2d_depthwise",
        gc.run(
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvParams::new(1, 1, 3)),
            &[x.clone(), dw.clone(), db.clone()],
        )
        .unwrap(),
    ));

    let pw = random(&mut r, &[4, 3, 1, 1]);
    let pb = random(&mut r, &[4]);
    out.push((
        "separable_conv2d",
        gc.run(
            |g, v| g.separable_conv2d(v[0], v[1], Some(v[2]), v[3], Some(v[4]), 2, 1),
            &[x.clone(), dw, db, pw, pb],
        )
        .unwrap(),
    ));

    out.push(("relu", gc.run(|g, v| Ok(g.relu(v[0])), std::slice::from_ref(&x)).unwrap()));

    let px = distinct(&mut r, &[1, 2, 7, 6]);
    out.push((
        "maxpool2d_ceil",
        gc.run(|g, v| g.maxpool2d_ceil(v[0], PoolParams::default()), &[px])
            .unwrap(),
    ));

    let y = random(&mut r, &[2, 2, 6, 5]);
    out.push((
        "channel_concat",
        gc.run(|g, v| g.channel_concat(v[0], v[1]), &[x.clone(), y]).unwrap(),
    ));

    out.push(("fold_stacked", gc.run(|g, v| g.fold_stacked(v[0]), &[x]).unwrap()));

    let h = random(&mut r, &[2, 12, 2, 3]);
    out.push(("prior_rows", gc.run(|g, v| g.prior_rows(v[0], 6), &[h]).unwrap()));

    let a = random(&mut r, &[2, 4, 3]);
    let c = random(&mut r, &[2, 2, 3]);
    out.push(("cat_rows", gc.run(|g, v| g.cat_rows(&[v[0], v[1]]), &[a, c]).unwrap()));

    let s = random(&mut r, &[3, 4]);
    out.push(("sum", gc.run(|g, v| Ok(g.sum(v[0])), std::slice::from_ref(&s)).unwrap()));
    let weights: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
    out.push(("dot", gc.run(|g, v| g.dot(v[0], weights.clone()), &[s]).unwrap()));

    out
}

fn codec_err(e: CodecError) -> odssd_core::tensor::TensorError {
    match e {
        CodecError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

/// Random scores and offsets against targets with mixed labels.
pub fn loss_check() -> GradCheckReport {
    let c = ModelConfig::toy();
    let mut r = rng(5);
    let (n, p, k) = (2, 30, c.num_classes());
    let conf = Tensor::<f64>::from_fn(&[n, p, k], |_| r.random_range(-2.0..2.0));
    let loc = Tensor::<f64>::from_fn(&[n, p, 6], |_| r.random_range(-2.0..2.0));
    let targets: Vec<EncodedTargets> = (0..n)
        .map(|_| EncodedTargets {
            labels: (0..p).map(|j| if j % 7 == 3 { 1 + j % (k - 1) } else { 0 }).collect(),
            locations: (0..p)
                .map(|_| std::array::from_fn(|_| r.random_range(-3.0..3.0)))
                .collect(),
            warnings: vec![],
        })
        .collect();
    GradCheck::default()
        .run(
            |g, v| Ok(loss_on_graph(g, v[0], v[1], &targets, &c).map_err(codec_err)?.0),
            &[conf, loc],
        )
        .unwrap()
}

/// Narrow toy model with non-zero biases: zero biases put many
/// pre-activations exactly on the rectifier kink.
pub fn gradcheck_model() -> Model<f64> {
    let mut c = ModelConfig::toy();
    c.width_scale = 0.0625;
    let mut m = build_model::<f64>(&c, 3).unwrap();
    let mut r = rng(23);
    for p in m.params_mut() {
        if p.name.ends_with("bias") {
            for v in p.tensor.data_mut() {
                *v = r.random_range(-0.1..0.1);
            }
        }
    }
    m
}

/// Multibox + disparity loss through the full forward pass, checked on the
/// input and on a sampled subset of every parameter.
pub fn end_to_end_check(per_input: usize) -> GradCheckReport {
    let m = gradcheck_model();
    let priors = generate_priors(m.config());
    let scene = generate_scene(&SceneSpec::toy(3), 0);
    let targets = vec![encode_objects(&scene.objects(), &priors, m.config())];
    let mut r = rng(29);
    let mut inputs = vec![random(&mut r, &m.input_shape(1))];
    inputs.extend(m.params().iter().map(|p| p.tensor.clone()));
    let gc = GradCheck {
        max_per_input: Some(per_input),
        ..Default::default()
    };
    gc.run(
        |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let out = m.forward_with(g, v[0], &v[1..]).expect("forward");
            Ok(loss_on_graph(g, out.confidences, out.locations, &targets, m.config())
                .map_err(codec_err)?
                .0)
        },
        &inputs,
    )
    .unwrap()
}

/// Largest decode(encode(g)) error over `count` random gt/prior pairs, in
/// view pixels.
pub fn codec_round_trip(count: usize) -> f64 {
    use odssd_core::codec::{decode_box, encode_box, GtBox};
    use odssd_core::model::Prior;
    use odssd_core::BBox;

    let c = ModelConfig::od_ssd_640();
    let (vw, vh) = (c.view_width as f64, c.view_height as f64);
    let mut r = rng(41);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let p = Prior {
            cx: r.random_range(0.0..1.0),
            cy: r.random_range(0.0..1.0),
            w: r.random_range(0.02..1.0),
            h: r.random_range(0.02..1.0),
        };
        let g = GtBox {
            label: r.random_range(1..c.num_classes()),
            bbox: BBox::from_center(
                r.random_range(0.0..1.0),
                r.random_range(0.0..1.0),
                r.random_range(0.01..1.0),
                r.random_range(0.01..1.0),
            ),
            dx: r.random_range(-50.0..300.0),
            dy: r.random_range(-20.0..20.0),
        };
        let d = decode_box(&encode_box(&g, &p, &c), &p, &c);
        let want = g.bbox.scale(vw, vh);
        for e in [
            d.bbox.xmin - want.xmin,
            d.bbox.ymin - want.ymin,
            d.bbox.xmax - want.xmax,
            d.bbox.ymax - want.ymax,
            d.dx - g.dx,
            d.dy - g.dy,
        ] {
            worst = worst.max(e.abs());
        }
    }
    worst
}

/// Whether all-zero offsets decode to every prior of both configurations.
pub fn zero_locations_decode_to_priors() -> bool {
    use odssd_core::codec::decode_box;
    use odssd_core::BBox;

    [ModelConfig::od_ssd_640(), ModelConfig::od_ssd_320(), ModelConfig::toy()]
        .iter()
        .all(|c| {
            let (vw, vh) = (c.view_width as f64, c.view_height as f64);
            generate_priors(c).iter().all(|p| {
                let d = decode_box(&[0.0; 6], p, c);
                d.bbox == BBox::from_center(p.cx * vw, p.cy * vh, p.w * vw, p.h * vh)
                    && d.dx == 0.0
                    && d.dy == 0.0
                    && !d.clamped
            })
        })
}
