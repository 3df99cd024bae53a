//! Training loop, validation, augmentation and image-size selection.

use intra_tensor::{Adam, AdamConfig, Graph, Real, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IntraError, Result};
use crate::image::{Dihedral, Image};
use crate::metrics::{inpaint_loss_graph, LossFilters, LossWeights};
use crate::model::{IntraModel, ModelConfig, WindowBatch};
use crate::patching::{sample_window_spec, window_from_image, WindowSample};

/// Smoothing half-width and improvement threshold of the image-size heuristic.
pub const SIZE_SMOOTHING: usize = 5;
pub const SIZE_IMPROVEMENT: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub windows_per_image: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps over the whole run.
    pub max_steps: Option<usize>,
    pub validation_fraction: f64,
    pub validation_cap: usize,
    /// Hold out validation images; otherwise the epoch training loss drives
    /// early stopping.
    pub validate: bool,
    pub augment: bool,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            windows_per_image: 600,
            batch_size: 256,
            lr: 1e-4,
            patience: 50,
            max_epochs: 1000,
            max_steps: None,
            validation_fraction: 0.10,
            validation_cap: 20,
            validate: true,
            augment: true,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate_config(&self) -> Result<()> {
        if self.windows_per_image == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(IntraError::Config(
                "windows_per_image, batch_size and max_epochs must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.loss.alpha < 0.0 || self.loss.beta < 0.0 {
            return Err(IntraError::Config("lr, alpha and beta must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Number of held-out validation images for a set of `n`.
pub fn validation_count(n: usize, fraction: f64, cap: usize) -> usize {
    ((n as f64 * fraction).ceil() as usize).min(cap)
}

/// One line of training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val: f64,
    pub patience_left: usize,
    pub steps: usize,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,best_val,patience_left";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.best_val, self.patience_left
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub steps: usize,
}

/// Anything that fills in the hidden patch of each window.
pub trait Inpainter {
    fn model_config(&self) -> &ModelConfig;

    /// Reconstructed target patches `[B, P]`.
    fn inpaint(&self, batch: &WindowBatch) -> Result<Tensor<f32>>;
}

impl Inpainter for IntraModel<f32> {
    fn model_config(&self) -> &ModelConfig {
        self.config()
    }

    fn inpaint(&self, batch: &WindowBatch) -> Result<Tensor<f32>> {
        self.forward(batch)
    }
}

/// Loss of the batch and its gradient for every parameter.
pub fn loss_and_gradients<T: Real>(
    model: &IntraModel<T>,
    batch: &WindowBatch,
    filters: &LossFilters<T>,
    weights: LossWeights,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let trace = model.forward_graph(&mut g, batch)?;
    let target = g.constant(batch.targets());
    let loss = inpaint_loss_graph(&mut g, trace.output, target, filters, weights)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let grads = trace
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take_or_zeros(v, p))
        .collect();
    Ok((value, grads))
}

/// Loss of the batch without gradients.
pub fn batch_loss<T: Real>(model: &IntraModel<T>, batch: &WindowBatch, filters: &LossFilters<T>, weights: LossWeights) -> Result<T> {
    let mut g = Graph::new();
    let trace = model.forward_graph(&mut g, batch)?;
    let target = g.constant(batch.targets());
    let loss = inpaint_loss_graph(&mut g, trace.output, target, filters, weights)?;
    Ok(g.value(loss).item()?)
}

fn reconstruction_loss<M: Inpainter + ?Sized>(model: &M, batch: &WindowBatch, filters: &LossFilters<f32>, weights: LossWeights) -> Result<f64> {
    let recon = model.inpaint(batch)?;
    let mut g = Graph::new();
    let r = g.constant(recon);
    let t = g.constant(batch.targets());
    let loss = inpaint_loss_graph(&mut g, r, t, filters, weights)?;
    Ok(g.value(loss).item()? as f64)
}

/// Uniformly random element of the rotation/flip group applied to `image`.
pub fn augment<R: Rng + ?Sized>(image: &Image, rng: &mut R) -> Result<Image> {
    Dihedral::from_index(rng.gen_range(0..8)).apply(image)
}

/// `count` windows from `image`, optionally under a random rotation/flip each.
pub fn sample_windows<R: Rng + ?Sized>(
    image: &Image,
    config: &ModelConfig,
    count: usize,
    augment: bool,
    rng: &mut R,
) -> Result<Vec<WindowSample>> {
    let g = config.grid_side();
    (0..count)
        .map(|_| {
            let t = if augment {
                Dihedral::from_index(rng.gen_range(0..8))
            } else {
                Dihedral::IDENTITY
            };
            let spec = sample_window_spec(g, g, config.window_side, rng)?;
            window_from_image(image, config.patch_size, t, &spec)
        })
        .collect()
}

/// Mean loss over a seed-determined fixed set of windows from `images`.
pub fn validation_loss<M: Inpainter + ?Sized>(
    model: &M,
    images: &[&Image],
    windows_per_image: usize,
    batch_size: usize,
    seed: u64,
    weights: LossWeights,
) -> Result<f64> {
    let windows = validation_windows(images, model.model_config(), windows_per_image, seed)?;
    let filters = LossFilters::new(model.model_config().patch_size, model.model_config().channels);
    windows_loss(model, &windows, batch_size, &filters, weights)
}

fn validation_windows(images: &[&Image], config: &ModelConfig, per_image: usize, seed: u64) -> Result<Vec<WindowSample>> {
    if images.is_empty() {
        return Err(IntraError::Dataset("validation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(images.len() * per_image);
    for img in images {
        out.extend(sample_windows(img, config, per_image, false, &mut rng)?);
    }
    Ok(out)
}

fn windows_loss<M: Inpainter + ?Sized>(
    model: &M,
    windows: &[WindowSample],
    batch_size: usize,
    filters: &LossFilters<f32>,
    weights: LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = WindowBatch::new(chunk, model.model_config())?;
        total += reconstruction_loss(model, &batch, filters, weights)? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

fn check_images(images: &[Image], config: &ModelConfig) -> Result<()> {
    if images.is_empty() {
        return Err(IntraError::Dataset("no training images".into()));
    }
    for img in images {
        if img.height() != config.image_size || img.width() != config.image_size || img.channels() != config.channels {
            return Err(IntraError::Dataset(format!(
                "training image is {}x{}x{}, model expects {}x{}x{}",
                img.height(),
                img.width(),
                img.channels(),
                config.image_size,
                config.image_size,
                config.channels
            )));
        }
    }
    Ok(())
}

fn non_finite(epoch: usize, step: usize, err: IntraError) -> IntraError {
    match err {
        IntraError::Tensor(e @ (TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. })) => {
            IntraError::NonFiniteLoss {
                epoch,
                step,
                detail: e.to_string(),
            }
        }
        other => other,
    }
}

/// Trains `model` in place and leaves it at the best epoch's weights.
///
/// `observer` sees every epoch record as it is produced.
pub fn train<R: Rng + ?Sized>(
    model: &mut IntraModel<f32>,
    images: &[Image],
    config: &TrainConfig,
    rng: &mut R,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate_config()?;
    let mc = *model.config();
    check_images(images, &mc)?;
    let n = images.len();
    let (train_indices, validation_indices) = if config.validate {
        let v = validation_count(n, config.validation_fraction, config.validation_cap);
        if v == 0 || n < v + 1 {
            return Err(IntraError::Dataset(format!(
                "{n} image(s) cannot be split into training and validation sets"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut val = order[..v].to_vec();
        let mut tr = order[v..].to_vec();
        val.sort_unstable();
        tr.sort_unstable();
        (tr, val)
    } else {
        ((0..n).collect(), Vec::new())
    };

    let filters = LossFilters::<f32>::new(mc.patch_size, mc.channels);
    let val_seed: u64 = rng.gen();
    let val_windows = if config.validate {
        let imgs: Vec<&Image> = validation_indices.iter().map(|&i| &images[i]).collect();
        validation_windows(&imgs, &mc, config.windows_per_image, val_seed)?
    } else {
        Vec::new()
    };

    let adam_config = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_config, model.params());
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params = model.params().to_vec();
    let mut since_improvement = 0;
    let mut history = Vec::new();
    let mut steps = 0;

    for epoch in 1..=config.max_epochs {
        let mut draws: Vec<usize> = train_indices
            .iter()
            .flat_map(|&i| std::iter::repeat_n(i, config.windows_per_image))
            .collect();
        draws.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in draws.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let mut samples = Vec::with_capacity(chunk.len());
            for &i in chunk {
                samples.extend(sample_windows(&images[i], &mc, 1, config.augment, rng)?);
            }
            let batch = WindowBatch::new(&samples, &mc)?;
            let (loss, grads) =
                loss_and_gradients(model, &batch, &filters, config.loss).map_err(|e| non_finite(epoch, steps, e))?;
            if !loss.is_finite() {
                return Err(IntraError::NonFiniteLoss {
                    epoch,
                    step: steps,
                    detail: format!("batch loss {loss}"),
                });
            }
            adam.step(model.params_mut(), &grads)?;
            steps += 1;
            loss_sum += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            break;
        }
        let train_loss = loss_sum / seen as f64;
        let val_loss = if config.validate {
            windows_loss(&*model, &val_windows, config.batch_size, &filters, config.loss)
                .map_err(|e| non_finite(epoch, steps, e))?
        } else {
            train_loss
        };
        if val_loss < best {
            best = val_loss;
            best_epoch = epoch;
            best_params.clone_from_slice(model.params());
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            best_val: best,
            patience_left: config.patience.saturating_sub(since_improvement),
            steps,
        };
        observer(&record);
        history.push(record);
        if since_improvement >= config.patience {
            break;
        }
    }
    if best_epoch > 0 {
        model.params_mut().clone_from_slice(&best_params);
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_loss: best,
        train_indices,
        validation_indices,
        steps,
    })
}

/// Validation loss of the best epoch averaged over the surrounding epochs.
pub fn smoothed_best_loss(history: &[EpochRecord]) -> Option<f64> {
    let (best_idx, _) = history
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.val_loss.total_cmp(&b.1.val_loss))?;
    let lo = best_idx.saturating_sub(SIZE_SMOOTHING);
    let hi = (best_idx + SIZE_SMOOTHING).min(history.len() - 1);
    let window = &history[lo..=hi];
    Some(window.iter().map(|r| r.val_loss).sum::<f64>() / window.len() as f64)
}

/// Index of the smallest candidate whose successor improves the loss by
/// less than the threshold; the last candidate when every step improves.
pub fn choose_image_size(losses: &[f64]) -> usize {
    for i in 0..losses.len().saturating_sub(1) {
        if losses[i] - losses[i + 1] < SIZE_IMPROVEMENT {
            return i;
        }
    }
    losses.len().saturating_sub(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeSelection {
    pub chosen: usize,
    /// `(size, smoothed validation loss)` per candidate.
    pub losses: Vec<(usize, f64)>,
}

/// Trains a fresh model per candidate size for `epochs` epochs and applies
/// the size heuristic. `load` yields the training images at a given size.
pub fn select_image_size(
    mut load: impl FnMut(usize) -> Result<Vec<Image>>,
    base: ModelConfig,
    train_config: &TrainConfig,
    sizes: &[usize],
    epochs: usize,
    seed: u64,
) -> Result<SizeSelection> {
    if sizes.len() < 2 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(IntraError::Config("need at least two ascending candidate sizes".into()));
    }
    let tc = TrainConfig {
        max_epochs: epochs,
        patience: usize::MAX,
        ..train_config.clone()
    };
    let mut losses = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let config = ModelConfig { image_size: size, ..base };
        let images = load(size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = IntraModel::<f32>::new(config, &mut rng)?;
        let outcome = train(&mut model, &images, &tc, &mut rng, |_| {})?;
        let loss = smoothed_best_loss(&outcome.history).ok_or_else(|| IntraError::invalid("no epochs trained"))?;
        losses.push((size, loss));
    }
    let idx = choose_image_size(&losses.iter().map(|l| l.1).collect::<Vec<_>>());
    Ok(SizeSelection {
        chosen: sizes[idx],
        losses,
    })
}
