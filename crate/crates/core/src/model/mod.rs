//! The detector network: a SqueezeNet-1.1 style base over the stacked
//! pair, a fold of the stacked feature map into channel-concatenated
//! left/right halves, stride-2 extras, and per-scale separable heads that
//! emit class scores and six location channels (cx, cy, w, h, dx, dy) per
//! prior.

mod config;
mod priors;
mod weights;

pub use config::ModelConfig;
pub use priors::{generate_priors, head_grids, Prior};
pub use weights::{load_weights, quantize_int8, read_manifest, save_weights, Precision, WeightsEntry, WeightsManifest};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::kernels::{conv_out_dim, pool_out_dim};
use crate::tensor::{ConvParams, Element, Graph, PoolParams, Tensor, TensorError, Var};

/// Location channels per prior: box (cx, cy, w, h) plus disparity (dx, dy).
pub const LOC_DIMS: usize = 6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("layer {layer}: expects {expected} input channels, predecessor gives {got}")]
    Channels { layer: String, expected: usize, got: usize },
    #[error("input shape {got:?} does not match configured {expected:?}")]
    Resolution { expected: Vec<usize>, got: Vec<usize> },
    #[error("weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy)]
struct FireSpec {
    inp: usize,
    squeeze: usize,
    e1: usize,
    e3: usize,
}

#[derive(Debug, Clone, Copy)]
enum BaseSpec {
    Conv { inp: usize, out: usize },
    Relu,
    Pool,
    Fire(FireSpec),
}

const fn fire(inp: usize, squeeze: usize, e1: usize, e3: usize) -> BaseSpec {
    BaseSpec::Fire(FireSpec { inp, squeeze, e1, e3 })
}

/// SqueezeNet 1.1 features with 128/128 expands on the last two Fire modules.
const BASE: [BaseSpec; 13] = [
    BaseSpec::Conv { inp: 3, out: 64 },
    BaseSpec::Relu,
    BaseSpec::Pool,
    fire(64, 16, 64, 64),
    fire(128, 16, 64, 64),
    BaseSpec::Pool,
    fire(128, 32, 128, 128),
    fire(256, 32, 128, 128),
    BaseSpec::Pool,
    fire(256, 48, 192, 192),
    fire(384, 48, 192, 192),
    fire(384, 64, 128, 128),
    fire(256, 64, 128, 128),
];

/// Index of the base entry whose output feeds the first head.
pub const TAP_INDEX: usize = 11;

/// (input, reduced, output) channels of each extra block.
const EXTRAS: [(usize, usize, usize); 3] = [(512, 256, 512), (512, 256, 512), (512, 128, 256)];

/// Input channels of the four heads.
const HEAD_INPUTS: [usize; 4] = [512, 512, 512, 256];

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    weight: usize,
    bias: usize,
    params: ConvParams,
}

#[derive(Debug, Clone, Copy)]
struct SepRef {
    depthwise: ConvRef,
    pointwise: ConvRef,
}

#[derive(Debug, Clone, Copy)]
enum BaseLayer {
    Conv(ConvRef),
    Relu,
    Pool,
    Fire { squeeze: ConvRef, e1: ConvRef, e3: ConvRef },
}

#[derive(Debug, Clone, Copy)]
struct Extra {
    reduce: ConvRef,
    sep: SepRef,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// (N, P, K) raw class scores.
    pub confidences: Var,
    /// (N, P, 6) encoded locations.
    pub locations: Var,
    /// Base output at the tap point, before folding.
    pub tap: Var,
    /// Folded tap feature (input of head 0).
    pub folded_tap: Var,
    /// Head feature maps, in head order.
    pub sources: Vec<Var>,
}

/// The assembled network with its parameter registry.
#[derive(Debug, Clone)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    base: Vec<BaseLayer>,
    extras: Vec<Extra>,
    regression: Vec<SepRef>,
    classification: Vec<SepRef>,
}

fn scaled(c: usize, scale: f64) -> usize {
    ((c as f64 * scale).round() as usize).max(1)
}

struct Builder<T: Element> {
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<T> {
    /// Uniform in `±gain * sqrt(3 / fan_in)`, zero bias.
    fn conv(&mut self, name: &str, inp: usize, out: usize, k: usize, params: ConvParams, gain: f64) -> ConvRef {
        let cg = inp / params.groups;
        let fan_in = cg * k * k;
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[out, cg, k, k], |_| T::from_f64(rng.random_range(-bound..bound)));
        self.params.push(Param {
            name: format!("{name}.weight"),
            tensor: w,
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            tensor: Tensor::zeros(&[out]),
        });
        ConvRef {
            weight: self.params.len() - 2,
            bias: self.params.len() - 1,
            params,
        }
    }

    fn separable(&mut self, name: &str, inp: usize, out: usize, stride: usize, out_gain: f64) -> SepRef {
        let relu_gain = 2f64.sqrt();
        SepRef {
            depthwise: self.conv(
                &format!("{name}.depthwise"),
                inp,
                inp,
                3,
                ConvParams::new(stride, 1, inp),
                relu_gain,
            ),
            pointwise: self.conv(
                &format!("{name}.pointwise"),
                inp,
                out,
                1,
                ConvParams::default(),
                out_gain,
            ),
        }
    }
}

/// Checks the declared channel flow of the full-width network.
fn check_channel_flow() -> Result<usize, ModelError> {
    let mut ch = 3;
    let mut tap_out = 0;
    for (i, spec) in BASE.iter().enumerate() {
        match *spec {
            BaseSpec::Conv { inp, out } => {
                if inp != ch {
                    return Err(ModelError::Channels {
                        layer: format!("base.{i}"),
                        expected: inp,
                        got: ch,
                    });
                }
                ch = out;
            }
            BaseSpec::Fire(f) => {
                if f.inp != ch {
                    return Err(ModelError::Channels {
                        layer: format!("base.{i}"),
                        expected: f.inp,
                        got: ch,
                    });
                }
                ch = f.e1 + f.e3;
            }
            BaseSpec::Relu | BaseSpec::Pool => {}
        }
        if i == TAP_INDEX {
            tap_out = ch;
        }
    }
    if HEAD_INPUTS[0] != 2 * tap_out {
        return Err(ModelError::Channels {
            layer: "regression.0".into(),
            expected: HEAD_INPUTS[0],
            got: 2 * tap_out,
        });
    }
    let mut ch = 2 * ch;
    for (i, &(inp, _, out)) in EXTRAS.iter().enumerate() {
        if inp != ch {
            return Err(ModelError::Channels {
                layer: format!("extras.{i}"),
                expected: inp,
                got: ch,
            });
        }
        if HEAD_INPUTS[i + 1] != out {
            return Err(ModelError::Channels {
                layer: format!("regression.{}", i + 1),
                expected: HEAD_INPUTS[i + 1],
                got: out,
            });
        }
        ch = out;
    }
    Ok(tap_out)
}

/// Builds the network for `config` with weights drawn from `seed`.
pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>, ModelError> {
    config.validate().map_err(ModelError::Config)?;
    check_channel_flow()?;
    let s = config.width_scale;
    let relu_gain = 2f64.sqrt();
    let mut b = Builder {
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };

    let mut base = Vec::with_capacity(BASE.len());
    let mut ch = 3;
    let mut tap_ch = 0;
    for (i, spec) in BASE.iter().enumerate() {
        let name = format!("base.{i}");
        let layer = match *spec {
            BaseSpec::Conv { out, .. } => {
                let out = scaled(out, s);
                let r = b.conv(&name, ch, out, 3, ConvParams::new(2, 1, 1), relu_gain);
                ch = out;
                BaseLayer::Conv(r)
            }
            BaseSpec::Relu => BaseLayer::Relu,
            BaseSpec::Pool => BaseLayer::Pool,
            BaseSpec::Fire(f) => {
                let (sq, e1, e3) = (scaled(f.squeeze, s), scaled(f.e1, s), scaled(f.e3, s));
                let squeeze = b.conv(&format!("{name}.squeeze"), ch, sq, 1, ConvParams::default(), relu_gain);
                let r1 = b.conv(
                    &format!("{name}.expand1x1"),
                    sq,
                    e1,
                    1,
                    ConvParams::default(),
                    relu_gain,
                );
                let r3 = b.conv(
                    &format!("{name}.expand3x3"),
                    sq,
                    e3,
                    3,
                    ConvParams::new(1, 1, 1),
                    relu_gain,
                );
                ch = e1 + e3;
                BaseLayer::Fire {
                    squeeze,
                    e1: r1,
                    e3: r3,
                }
            }
        };
        if i == TAP_INDEX {
            tap_ch = ch;
        }
        base.push(layer);
    }

    let mut head_in = vec![2 * tap_ch];
    let mut ch = 2 * ch;
    let mut extras = Vec::with_capacity(EXTRAS.len());
    for (i, &(_, mid, out)) in EXTRAS.iter().enumerate() {
        let (mid, out) = (scaled(mid, s), scaled(out, s));
        let reduce = b.conv(
            &format!("extras.{i}.reduce"),
            ch,
            mid,
            1,
            ConvParams::default(),
            relu_gain,
        );
        let sep = b.separable(&format!("extras.{i}.separable"), mid, out, 2, 1.0);
        extras.push(Extra { reduce, sep });
        head_in.push(out);
        ch = out;
    }

    let a = config.priors_per_cell;
    let k = config.num_classes();
    let regression = head_in
        .iter()
        .enumerate()
        .map(|(i, &c)| b.separable(&format!("regression.{i}"), c, a * LOC_DIMS, 1, 1.0))
        .collect();
    let classification = head_in
        .iter()
        .enumerate()
        .map(|(i, &c)| b.separable(&format!("classification.{i}"), c, a * k, 1, 1.0))
        .collect();

    Ok(Model {
        config: config.clone(),
        params: b.params,
        base,
        extras,
        regression,
        classification,
    })
}

/// Parameter count of the network from per-layer closed forms, independent
/// of the built registry. Returns (count, fp32 bytes).
pub fn closed_form_param_count(config: &ModelConfig) -> (usize, usize) {
    let s = config.width_scale;
    let conv = |inp: usize, out: usize, k: usize| inp * out * k * k + out;
    let fire = |inp: usize, sq: usize, e1: usize, e3: usize| conv(inp, sq, 1) + conv(sq, e1, 1) + conv(sq, e3, 3);
    let sep = |inp: usize, out: usize| (inp * 9 + inp) + conv(inp, out, 1);
    let mut total = 0;
    let mut ch = 3;
    let mut tap = 0;
    for (i, spec) in BASE.iter().enumerate() {
        match *spec {
            BaseSpec::Conv { out, .. } => {
                let out = scaled(out, s);
                total += conv(ch, out, 3);
                ch = out;
            }
            BaseSpec::Fire(f) => {
                let (sq, e1, e3) = (scaled(f.squeeze, s), scaled(f.e1, s), scaled(f.e3, s));
                total += fire(ch, sq, e1, e3);
                ch = e1 + e3;
            }
            _ => {}
        }
        if i == TAP_INDEX {
            tap = ch;
        }
    }
    let mut heads = vec![2 * tap];
    let mut ch = 2 * ch;
    for &(_, mid, out) in &EXTRAS {
        let (mid, out) = (scaled(mid, s), scaled(out, s));
        total += conv(ch, mid, 1) + sep(mid, out);
        heads.push(out);
        ch = out;
    }
    let a = config.priors_per_cell;
    for &c in &heads {
        total += sep(c, a * LOC_DIMS) + sep(c, a * config.num_classes());
    }
    (total, 4 * total)
}

impl<T: Element> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// (parameter count, bytes at fp32).
    pub fn param_count(&self) -> (usize, usize) {
        let n = self.params.iter().map(|p| p.tensor.numel()).sum::<usize>();
        (n, 4 * n)
    }

    /// Copies of the parameters in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            base: self.base.clone(),
            extras: self.extras.clone(),
            regression: self.regression.clone(),
            classification: self.classification.clone(),
        }
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn register_params(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.tensor.clone())).collect()
    }

    /// Expected stacked input shape for batch size `n`.
    pub fn input_shape(&self, n: usize) -> [usize; 4] {
        let (h, w) = self.config.input_hw();
        [n, 3, h, w]
    }

    /// Runs the network on `input` using `params` (one handle per registry
    /// entry, in order).
    pub fn forward_with(&self, g: &mut Graph<T>, input: Var, params: &[Var]) -> Result<ForwardVars, ModelError> {
        let shape = g.value(input).shape().to_vec();
        let n = shape.first().copied().unwrap_or(0);
        if shape.len() != 4 || shape[1..] != self.input_shape(n)[1..] {
            return Err(ModelError::Resolution {
                expected: self.input_shape(n).to_vec(),
                got: shape,
            });
        }
        if params.len() != self.params.len() {
            return Err(ModelError::Weights(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let conv =
            |g: &mut Graph<T>, x: Var, r: &ConvRef| g.conv2d(x, params[r.weight], Some(params[r.bias]), r.params);
        let sep = |g: &mut Graph<T>, x: Var, r: &SepRef| -> Result<Var, TensorError> {
            let d = conv(g, x, &r.depthwise)?;
            let d = g.relu(d);
            conv(g, d, &r.pointwise)
        };

        let mut h = input;
        let mut tap = None;
        for (i, layer) in self.base.iter().enumerate() {
            h = match layer {
                BaseLayer::Conv(r) => conv(g, h, r)?,
                BaseLayer::Relu => g.relu(h),
                BaseLayer::Pool => g.maxpool2d_ceil(h, PoolParams::default())?,
                BaseLayer::Fire { squeeze, e1, e3 } => {
                    let s = conv(g, h, squeeze)?;
                    let s = g.relu(s);
                    let a = conv(g, s, e1)?;
                    let a = g.relu(a);
                    let b = conv(g, s, e3)?;
                    let b = g.relu(b);
                    g.channel_concat(a, b)?
                }
            };
            if i == TAP_INDEX {
                tap = Some(h);
            }
        }
        let tap = tap.expect("tap index inside base");
        let folded_tap = g.fold_stacked(tap)?;
        let mut sources = vec![folded_tap];
        let mut e = g.fold_stacked(h)?;
        for extra in &self.extras {
            let r = conv(g, e, &extra.reduce)?;
            let r = g.relu(r);
            e = sep(g, r, &extra.sep)?;
            sources.push(e);
        }

        let k = self.config.num_classes();
        let mut locs = Vec::with_capacity(sources.len());
        let mut confs = Vec::with_capacity(sources.len());
        for (i, &src) in sources.iter().enumerate() {
            let l = sep(g, src, &self.regression[i])?;
            locs.push(g.prior_rows(l, LOC_DIMS)?);
            let c = sep(g, src, &self.classification[i])?;
            confs.push(g.prior_rows(c, k)?);
        }
        Ok(ForwardVars {
            confidences: g.cat_rows(&confs)?,
            locations: g.cat_rows(&locs)?,
            tap,
            folded_tap,
            sources,
        })
    }

    /// Inference forward pass: returns (confidences (N, P, K), locations (N, P, 6)).
    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let mut g = Graph::no_grad();
        self.forward_in(&mut g, input)
    }

    /// Inference forward pass inside a caller-provided graph (for timing).
    pub fn forward_in(&self, g: &mut Graph<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let x = g.input(input.clone());
        let pv = self.register_params(g);
        let out = self.forward_with(g, x, &pv)?;
        Ok((g.take_value(out.confidences), g.take_value(out.locations)))
    }

    /// Total number of priors for the configured resolution.
    pub fn num_priors(&self) -> usize {
        head_grids(&self.config).iter().map(|(h, w)| h * w).sum::<usize>() * self.config.priors_per_cell
    }
}

/// (height, width) of the tap feature before folding, from the shape formulas.
pub fn tap_grid(config: &ModelConfig) -> (usize, usize) {
    let (h, w) = config.input_hw();
    let down = |x: usize| {
        let x = conv_out_dim(x, 3, 2, 1).unwrap_or(1);
        (0..3).fold(x, |x, _| pool_out_dim(x, 3, 2))
    };
    (down(h), down(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fire_parameter_formula() {
        let c = ModelConfig::od_ssd_640();
        let m = build_model::<f32>(&c, 0).unwrap();
        let fire3: usize = m
            .params()
            .iter()
            .filter(|p| p.name.starts_with("base.3."))
            .map(|p| p.tensor.numel())
            .sum();
        assert_eq!(fire3, 11_408);
        let base: usize = m
            .params()
            .iter()
            .filter(|p| p.name.starts_with("base."))
            .map(|p| p.tensor.numel())
            .sum();
        assert_eq!(base, 541_760);
        let (n, bytes) = m.param_count();
        assert_eq!((n, bytes), closed_form_param_count(&c));
        assert!((1_250_000..=1_600_000).contains(&n), "{n}");
    }

    #[test]
    fn head_channel_counts() {
        let c = ModelConfig::od_ssd_640();
        let m = build_model::<f32>(&c, 0).unwrap();
        let shape = |n: &str| m.param(n).unwrap().tensor.shape().to_vec();
        assert_eq!(shape("regression.0.depthwise.weight"), vec![512, 1, 3, 3]);
        assert_eq!(shape("regression.0.pointwise.weight"), vec![36, 512, 1, 1]);
        assert_eq!(shape("regression.3.pointwise.weight"), vec![36, 256, 1, 1]);
        assert_eq!(shape("classification.1.pointwise.weight"), vec![30, 512, 1, 1]);
        assert_eq!(shape("extras.0.reduce.weight"), vec![256, 512, 1, 1]);
        assert_eq!(shape("extras.2.separable.pointwise.weight"), vec![256, 128, 1, 1]);
        assert_eq!(shape("base.11.expand3x3.weight"), vec![128, 64, 3, 3]);
        assert_eq!(shape("base.12.squeeze.weight"), vec![64, 256, 1, 1]);
    }

    #[test]
    fn tap_grids() {
        assert_eq!(tap_grid(&ModelConfig::od_ssd_640()), (40, 40));
        assert_eq!(tap_grid(&ModelConfig::od_ssd_320()), (20, 20));
        assert_eq!(tap_grid(&ModelConfig::toy()), (10, 10));
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut c = ModelConfig::toy();
        c.width_scale = 0.125;
        let mut m = build_model::<f32>(&c, 1).unwrap();
        for p in m.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::full(&m.input_shape(2), 0.7f32);
        let (conf, loc) = m.forward(&x).unwrap();
        assert_eq!(conf.shape(), &[2, 438, 5]);
        assert_eq!(loc.shape(), &[2, 438, 6]);
        assert!(conf.data().iter().chain(loc.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_resolution_rejected() {
        let mut c = ModelConfig::toy();
        c.width_scale = 0.125;
        let m = build_model::<f32>(&c, 1).unwrap();
        let x = Tensor::zeros(&[1, 3, 80, 160]);
        assert!(matches!(m.forward(&x), Err(ModelError::Resolution { .. })));
    }

    #[test]
    fn build_is_seeded() {
        let c = ModelConfig::toy();
        let a = build_model::<f32>(&c, 5).unwrap();
        let b = build_model::<f32>(&c, 5).unwrap();
        let d = build_model::<f32>(&c, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), d.params());
    }
}
