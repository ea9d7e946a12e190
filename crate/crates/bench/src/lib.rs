//! Fixtures shared by the criterion benches.

use odssd_core::model::{build_model, generate_priors, Model, ModelConfig, Prior};
use odssd_core::Tensor;

/// A seeded model with its priors and one deterministic input frame.
pub struct Fixture {
    pub model: Model<f32>,
    pub priors: Vec<Prior>,
    pub input: Tensor<f32>,
}

impl Fixture {
    pub fn new(config: &ModelConfig) -> Self {
        let model = build_model::<f32>(config, 0).expect("preset configs are valid");
        let priors = generate_priors(config);
        let input = frame(&model.input_shape(1));
        Fixture { model, priors, input }
    }
}

/// Pseudo-random values in [-1, 1), identical on every call.
pub fn frame(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 2654435761) % 1000) as f32 / 500.0 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shapes_agree() {
        let f = Fixture::new(&ModelConfig::toy());
        let (conf, loc) = f.model.forward(&f.input).unwrap();
        assert_eq!(conf.shape()[1], f.priors.len());
        assert_eq!(loc.shape()[1], f.priors.len());
    }
}
