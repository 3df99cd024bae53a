//! Whole-model gradient verification against central finite differences.

use intra_tensor::{finite_diff_gradient, relative_error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::Image;
use crate::metrics::{gradient_magnitude, LossFilters, LossWeights};
use crate::model::{IntraModel, ModelConfig, WindowBatch};
use crate::training::{batch_loss, loss_and_gradients, sample_windows};

pub const DEFAULT_STEP: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Smallest admissible nonzero Prewitt magnitude in the reconstruction at
/// the evaluation point; the loss has a kink where a magnitude reaches zero.
pub const KINK_MARGIN: f64 = 0.02;
const MAX_DRAWS: usize = 1000;

/// Smallest gradient magnitude of the reconstructed patches that is not
/// zero by reflection symmetry.
pub fn magnitude_margin(recon: &Tensor<f64>, config: &ModelConfig) -> f64 {
    let (k, c) = (config.patch_size, config.channels);
    let mut margin = f64::INFINITY;
    for patch in recon.data().chunks(k * k * c) {
        let img = Image::new(k, k, c, patch.iter().map(|&v| v as f32).collect()).expect("patch shape");
        for ch in 0..c {
            for m in gradient_magnitude(&img.channel(ch)) {
                if m != 0.0 {
                    margin = margin.min(m);
                }
            }
        }
    }
    margin
}

/// Toy architecture used for gradient verification.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        window_side: 3,
        latent_dim: 16,
        num_blocks: 2,
        num_heads: 2,
        image_size: 16,
        channels: 1,
        use_mfsa: true,
        use_long_residuals: true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error `|a - n| / max(|a|, |n|, floor)`
    /// with Euclidean norms over each parameter tensor.
    pub max_relative_error: f64,
    /// Tensor attaining `max_relative_error`.
    pub worst_tensor: String,
    /// Largest coordinate-wise relative error, same floor.
    pub max_coordinate_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst_coordinate: (String, usize),
    pub num_parameters: usize,
    pub loss: f64,
}

/// Backpropagated and central-difference gradients at one evaluation point.
#[derive(Debug, Clone)]
pub struct GradientComparison {
    pub names: Vec<String>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
    pub loss: f64,
}

fn norm(t: &[f64]) -> f64 {
    t.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl GradientComparison {
    pub fn report(&self, floor: f64) -> GradCheckReport {
        let mut tensor = (0.0, String::new());
        let mut coord = (0.0, String::new(), 0);
        for ((a, n), name) in self.analytic.iter().zip(&self.numeric).zip(&self.names) {
            let diff: Vec<f64> = a.data().iter().zip(n.data()).map(|(x, y)| x - y).collect();
            let e = relative_error(norm(&diff), 0.0, norm(a.data()).max(norm(n.data())).max(floor));
            if e > tensor.0 || tensor.1.is_empty() {
                tensor = (e, name.clone());
            }
            for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
                let e = relative_error(x, y, floor);
                if e > coord.0 || coord.1.is_empty() {
                    coord = (e, name.clone(), i);
                }
            }
        }
        GradCheckReport {
            max_relative_error: tensor.0,
            worst_tensor: tensor.1,
            max_coordinate_error: coord.0,
            worst_coordinate: (coord.1, coord.2),
            num_parameters: self.analytic.iter().map(Tensor::len).sum(),
            loss: self.loss,
        }
    }
}

/// Gradients of the batch loss of a random model on random windows, by
/// backpropagation and by central differences over every parameter.
/// Windows are redrawn until the loss is smooth within the step.
pub fn compare_gradients(config: ModelConfig, windows: usize, weights: LossWeights, seed: u64, step: f64) -> Result<GradientComparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = IntraModel::<f64>::new(config, &mut rng)?;
    let n = config.image_size;
    let image = Image::from_fn(n, n, config.channels, |_, _, _| rng.gen());
    let mut attempts = 0;
    let batch = loop {
        let samples = sample_windows(&image, &config, windows, true, &mut rng)?;
        let batch = WindowBatch::new(&samples, &config)?;
        attempts += 1;
        if attempts >= MAX_DRAWS || magnitude_margin(&model.forward(&batch)?, &config) >= KINK_MARGIN {
            break batch;
        }
    };
    let filters = LossFilters::<f64>::new(config.patch_size, config.channels);

    let (loss, analytic) = loss_and_gradients(&model, &batch, &filters, weights)?;
    let numeric = finite_diff_gradient(
        |p: &[Tensor<f64>]| {
            let m = model.with_params(p.to_vec()).map_err(into_tensor_error)?;
            batch_loss(&m, &batch, &filters, weights).map_err(into_tensor_error)
        },
        model.params(),
        step,
    )
    .map_err(crate::error::IntraError::from)?;
    Ok(GradientComparison {
        names: model.names().to_vec(),
        analytic,
        numeric,
        loss,
    })
}

/// Worst relative error between backpropagated and central-difference
/// gradients, see [`compare_gradients`].
pub fn model_gradient_check(
    config: ModelConfig,
    windows: usize,
    weights: LossWeights,
    seed: u64,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    Ok(compare_gradients(config, windows, weights, seed, step)?.report(floor))
}

fn into_tensor_error(e: crate::error::IntraError) -> intra_tensor::TensorError {
    match e {
        crate::error::IntraError::Tensor(t) => t,
        other => intra_tensor::TensorError::Invalid {
            op: "model_loss",
            reason: other.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_norms() {
        let t = |v: Vec<f64>| Tensor::new([v.len()], v).unwrap();
        let c = GradientComparison {
            names: vec!["a".into(), "b".into()],
            analytic: vec![t(vec![3.0, 4.0]), t(vec![0.0])],
            numeric: vec![t(vec![3.0, 4.5]), t(vec![1e-9])],
            loss: 0.0,
        };
        let r = c.report(1e-6);
        assert!((r.max_relative_error - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-12);
        assert_eq!(r.worst_tensor, "a");
        assert!((r.max_coordinate_error - 0.5 / 4.5).abs() < 1e-12);
        assert_eq!(r.worst_coordinate, ("a".to_string(), 1));
    }

    #[test]
    fn toy_model_gradients_match() {
        for weights in [LossWeights::default(), LossWeights { alpha: 1.0, beta: 1.0 }] {
            let r = model_gradient_check(toy_config(), 3, weights, 0, DEFAULT_STEP, DEFAULT_FLOOR).unwrap();
            println!("{r:?}");
            assert!(r.max_relative_error < 1e-4, "{r:?}");
        }
    }
}
