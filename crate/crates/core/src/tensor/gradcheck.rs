//! Central-difference gradient checking in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, Var};

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Gradient check settings.
///
/// Relative error per element is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`;
/// the floor keeps near-zero gradients from amplifying round-off.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub tolerance: f64,
    pub step: f64,
    pub floor: f64,
    pub seed: u64,
    /// Checks a seeded random subset of at most this many elements per
    /// input; `None` checks every element.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            tolerance: 1e-3,
            step: 1e-5,
            floor: 1e-3,
            seed: 0x9e37,
            max_per_input: None,
        }
    }
}

impl GradCheck {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheck {
            tolerance,
            ..Default::default()
        }
    }

    /// Checks `f` at `inputs`. Non-scalar outputs are reduced with a fixed
    /// random projection so every output element contributes.
    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        self.run_with(f, inputs, |_| {})
    }

    /// Like [`run`](Self::run), but lets `corrupt` edit the analytic
    /// gradients before comparison.
    pub fn run_with<F, C>(&self, f: F, inputs: &[Tensor<f64>], corrupt: C) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
        C: FnOnce(&mut [Vec<f64>]),
    {
        let mut projection: Option<Vec<f64>> = None;
        let mut eval = |xs: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.input_with_grad(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            let n = g.value(out).numel();
            let loss = if n == 1 {
                out
            } else {
                let w = projection
                    .get_or_insert_with(|| {
                        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
                    })
                    .clone();
                g.dot(out, w)?
            };
            let value = g.value(loss).item();
            if !want_grad {
                return Ok((value, vec![]));
            }
            g.backward(loss)?;
            let grads = vars
                .iter()
                .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            Ok((value, grads))
        };

        let (_, mut analytic) = eval(inputs, true)?;
        corrupt(&mut analytic);

        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            tolerance: self.tolerance,
            passed: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x51);
        for t in 0..work.len() {
            let n = work[t].numel();
            let elements: Vec<usize> = match self.max_per_input {
                Some(k) if k < n => rand::seq::index::sample(&mut rng, n, k).into_vec(),
                _ => (0..n).collect(),
            };
            for e in elements {
                let orig = work[t].data()[e];
                work[t].data_mut()[e] = orig + self.step;
                let (plus, _) = eval(&work, false)?;
                work[t].data_mut()[e] = orig - self.step;
                let (minus, _) = eval(&work, false)?;
                work[t].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[t].get(e).copied().unwrap_or(0.0);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                report.checked += 1;
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    if rel >= report.max_rel_error {
                        report.worst = Some((t, e));
                    }
                }
            }
        }
        report.passed = report.max_rel_error < self.tolerance;
        Ok(report)
    }
}

/// Shorthand for [`GradCheck::run`] with a given tolerance.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    GradCheck::with_tolerance(tolerance).run(f, inputs)
}
