//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use intra_core::checkpoint::{Checkpoint, Container};
use intra_core::config::RunConfig;
use intra_core::data::{generate_synthetic, synthetic_samples, Dataset, SynthConfig};
use intra_core::evaluator::{evaluate_category, EvaluationReport};
use intra_core::gradcheck::{model_gradient_check, toy_config, DEFAULT_FLOOR, DEFAULT_STEP};
use intra_core::image::{Image, Plane};
use intra_core::metrics::{gms_map, inpaint_loss, roc_auc, ssim_map, LossWeights};
use intra_core::model::{count_parameters, IntraModel, ModelConfig, WindowBatch};
use intra_core::patching::{select_window, WindowSpec};
use intra_core::scoring::{anomaly_from_diff, build_reference, multiscale_diff, reconstruct_image, ReferenceDiff};
use intra_core::training::{sample_windows, train, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy(image_size: usize, window_side: usize) -> ModelConfig {
    ModelConfig {
        patch_size: 8,
        window_side,
        latent_dim: 64,
        num_blocks: 4,
        num_heads: 4,
        image_size,
        channels: 3,
        use_mfsa: true,
        use_long_residuals: true,
    }
}

fn reference_config() -> ModelConfig {
    ModelConfig {
        patch_size: 16,
        window_side: 7,
        latent_dim: 512,
        num_blocks: 13,
        num_heads: 8,
        image_size: 256,
        channels: 3,
        use_mfsa: true,
        use_long_residuals: true,
    }
}

fn gradient_correctness() -> Outcome {
    let config = ModelConfig { channels: 1, ..toy_config() };
    let start = Instant::now();
    let r = model_gradient_check(config, 3, LossWeights::default(), 0, DEFAULT_STEP, DEFAULT_FLOOR).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        r.max_relative_error < 1e-4 && secs < 60.0,
        format!(
            "max relative error {:.3e} (worst tensor {}) over {} parameters, {:.1}s",
            r.max_relative_error, r.worst_tensor, r.num_parameters, secs
        ),
    )
}

/// Per-layer tally written out independently of the model code.
fn tally(patch_dim: usize, positions: usize, d: usize, blocks: usize, mfsa: bool) -> usize {
    let patch_embed = patch_dim * d;
    let position_table = positions * d;
    let inpaint_token = d;
    let layer_norms = 2 * (d + d);
    let query_or_key = if mfsa {
        (d * (2 * d) + 2 * d) + ((2 * d) * (d / 2) + d / 2)
    } else {
        d * d + d
    };
    let value = d * d + d;
    let output = d * d + d;
    let mlp = (d * 4 * d + 4 * d) + (4 * d * d + d);
    let head = d * patch_dim + patch_dim;
    patch_embed + position_table + inpaint_token + blocks * (layer_norms + 2 * query_or_key + value + output + mlp) + head
}

fn parameter_count() -> Outcome {
    let c = reference_config();
    let counted = count_parameters(&c);
    let tallied = tally(16 * 16 * 3, 16 * 16, 512, 13, true);
    let model = IntraModel::<f32>::new(c, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    let allocated = model.num_parameters();
    check(
        counted == tallied && counted == allocated && (54_000_000..=57_000_000).contains(&counted),
        format!("count_parameters {counted}, closed-form tally {tallied}, allocated {allocated}"),
    )
}

fn overfit() -> Outcome {
    let image = synthetic_samples(&SynthConfig {
        seed: 0,
        train: 1,
        test_normal: 0,
        test_defect: 0,
        size: 64,
    })
    .remove(0)
    .image;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = IntraModel::<f32>::new(toy(64, 5), &mut rng).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        windows_per_image: 32 * 50,
        batch_size: 32,
        lr: 1e-3,
        patience: usize::MAX,
        max_epochs: usize::MAX,
        max_steps: Some(2000),
        validate: false,
        augment: false,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let outcome = train(&mut model, std::slice::from_ref(&image), &tc, &mut rng, |_| {}).map_err(|e| e.to_string())?;
    let last = outcome.history.last().map_or(f64::NAN, |r| r.train_loss);
    let recon = reconstruct_image(&model, &image, 64).map_err(|e| e.to_string())?;
    let mae = recon.mean_abs_diff(&image).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        outcome.steps <= 2000 && last < 0.05 && mae < 0.05 && secs < 600.0,
        format!("{} steps, final epoch loss {last:.5}, reconstruction MAE {mae:.5}, {secs:.1}s", outcome.steps),
    )
}

struct Trained {
    model: IntraModel<f32>,
    reference: ReferenceDiff,
    dataset: Dataset,
    config: RunConfig,
    report: EvaluationReport,
}

fn detection_setup() -> Result<Trained, String> {
    let dataset = generate_synthetic(&SynthConfig {
        seed: 0,
        train: 20,
        test_normal: 10,
        test_defect: 10,
        size: 64,
    });
    let mut config = RunConfig {
        model: toy(64, 5),
        seed: 0,
        ..RunConfig::default()
    };
    config.train = TrainConfig {
        windows_per_image: 64,
        batch_size: 32,
        lr: 1e-3,
        patience: 5,
        max_epochs: 200,
        augment: false,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = IntraModel::<f32>::new(config.model, &mut rng).map_err(|e| e.to_string())?;
    let outcome = train(&mut model, &dataset.train, &config.train, &mut rng, |_| {}).map_err(|e| e.to_string())?;
    let train_images: Vec<Image> = outcome.train_indices.iter().map(|&i| dataset.train[i].clone()).collect();
    let reference = build_reference(&model, &train_images, 64, 1).map_err(|e| e.to_string())?;
    let report = evaluate_category(&model, &reference, &dataset, 64, 1).map_err(|e| e.to_string())?;
    Ok(Trained {
        model,
        reference,
        dataset,
        config,
        report,
    })
}

fn detection(t: &Result<Trained, String>, elapsed: Duration) -> Outcome {
    let t = t.as_ref().map_err(Clone::clone)?;
    let r = &t.report;
    let (img, px) = (r.image_auc.unwrap_or(f64::NAN), r.pixel_auc.unwrap_or(f64::NAN));
    let normal_max = r.scores.iter().filter(|s| !s.anomalous).map(|s| s.score).fold(f64::MIN, f64::max);
    let defects_above = r.scores.iter().filter(|s| s.anomalous && s.score > normal_max).count();
    let secs = elapsed.as_secs_f64();
    check(
        img >= 0.85 && px >= 0.80 && secs < 1200.0,
        format!("image AUC {img:.4}, pooled pixel AUC {px:.4}, {defects_above}/10 defective images above every normal score, {secs:.1}s"),
    )
}

/// Exhaustive search: the window containing the target whose center is
/// closest to it (Chebyshev, then L1), smaller `(r, s)` on ties.
fn centered_window(t: usize, u: usize, n: usize, side: usize) -> WindowSpec {
    let mut best: Option<((usize, usize, usize, usize), WindowSpec)> = None;
    for r in 1..=n - side + 1 {
        for s in 1..=n - side + 1 {
            let spec = WindowSpec {
                r,
                s,
                side,
                target: (t, u),
            };
            if !spec.contains(t, u) {
                continue;
            }
            let c = side / 2;
            let dy = (t - r).abs_diff(c);
            let dx = (u - s).abs_diff(c);
            let key = (dy.max(dx), dy + dx, r, s);
            if best.is_none_or(|(k, _)| key < k) {
                best = Some((key, spec));
            }
        }
    }
    best.expect("window exists").1
}

fn window_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut cases = 0;
    for n in [8, 16] {
        for side in [5, 7, 9] {
            if side > n {
                continue;
            }
            for t in 1..=n {
                for u in 1..=n {
                    cases += 1;
                    let got = select_window(t, u, n, n, side).map_err(|e| e.to_string())?;
                    if got != centered_window(t, u, n, side) {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches over {cases} (grid, side, target) cases"))
}

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let config = toy(64, 5);
    let model = IntraModel::<f32>::new(config, &mut rng).map_err(|e| e.to_string())?;
    let image = Image::from_fn(64, 64, 3, |_, _, _| rng.gen());
    let windows = sample_windows(&image, &config, 100, true, &mut rng).map_err(|e| e.to_string())?;
    let permuted: Vec<_> = windows
        .iter()
        .map(|w| {
            let mut perm: Vec<usize> = (0..w.seq_len()).collect();
            perm.shuffle(&mut rng);
            w.permuted(&perm)
        })
        .collect();
    let a = model.forward(&WindowBatch::new(&windows, &config).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let b = model.forward(&WindowBatch::new(&permuted, &config).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let dev = a.max_abs_diff(&b).map_err(|e| e.to_string())?;
    check(dev < 1e-5, format!("max output deviation {dev:.3e} over 100 permuted windows"))
}

/// AUC as the fraction of positive/negative pairs ordered correctly, ties
/// counting one half.
fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut doubled, mut pairs) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            doubled += match scores[i].partial_cmp(&scores[j]).expect("finite") {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    doubled as f64 / (2 * pairs) as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut auc_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..60);
        let levels = rng.gen_range(1..12);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.25).collect();
        if roc_auc(&scores, &labels).map_err(|e| e.to_string())? != pair_count_auc(&scores, &labels) {
            auc_mismatch += 1;
        }
    }
    let mut worst_ssim: f64 = 0.0;
    let mut worst_gms: f64 = 0.0;
    let mut worst_loss: f64 = 0.0;
    for (h, c) in [(8, 1), (16, 3), (33, 3)] {
        let x = Image::from_fn(h, h, c, |_, _, _| rng.gen());
        let s = ssim_map(&x, &x).map_err(|e| e.to_string())?;
        let g = gms_map(&x, &x).map_err(|e| e.to_string())?;
        worst_ssim = s.data().iter().fold(worst_ssim, |m, &v| m.max((v as f64 - 1.0).abs()));
        worst_gms = g.data().iter().fold(worst_gms, |m, &v| m.max((v as f64 - 1.0).abs()));
        worst_loss = worst_loss.max(inpaint_loss(&x, &x, LossWeights::default()).map_err(|e| e.to_string())?);
    }
    check(
        auc_mismatch == 0 && worst_ssim < 1e-6 && worst_gms < 1e-6 && worst_loss < 1e-6,
        format!(
            "AUC mismatches {auc_mismatch}/1000, max |SSIM-1| {worst_ssim:.1e}, max |GMS-1| {worst_gms:.1e}, max loss(x,x) {worst_loss:.1e}"
        ),
    )
}

fn anomaly_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut self_diff: f32 = 0.0;
    let mut zero_map: f32 = 0.0;
    let mut min_score = f64::INFINITY;
    let mut min_pixel = f32::INFINITY;
    for _ in 0..10 {
        let x = Image::from_fn(64, 64, 3, |_, _, _| rng.gen());
        let y = Image::from_fn(64, 64, 3, |_, _, _| rng.gen());
        self_diff = self_diff.max(multiscale_diff(&x, &x).map_err(|e| e.to_string())?.max().abs());
        let d = multiscale_diff(&x, &y).map_err(|e| e.to_string())?;
        let same = ReferenceDiff { map: d.clone(), count: 1 };
        let a = anomaly_from_diff(&d, &same).map_err(|e| e.to_string())?;
        zero_map = zero_map.max(a.map.max().abs()).max(a.score as f32);
        let other = ReferenceDiff {
            map: Plane::from_fn(64, 64, |_, _| rng.gen()),
            count: 3,
        };
        let b = anomaly_from_diff(&d, &other).map_err(|e| e.to_string())?;
        min_score = min_score.min(b.score);
        min_pixel = min_pixel.min(b.map.min());
    }
    check(
        self_diff == 0.0 && zero_map == 0.0 && min_score >= 0.0 && min_pixel >= 0.0,
        format!("max |diff(x,x)| {self_diff}, max map when diff = reference {zero_map}, min score {min_score:.3e}, min pixel {min_pixel:.3e}"),
    )
}

fn ablations() -> Outcome {
    let base = reference_config();
    let msa = ModelConfig { use_mfsa: false, ..base };
    let delta = count_parameters(&base) - count_parameters(&msa);
    let d = base.latent_dim;
    // two projections, each D->2D->D/2 replaced by D->D
    let predicted = base.num_blocks * 2 * ((2 * d * d + 2 * d + d * d + d / 2) - (d * d + d));
    let per_block = predicted / base.num_blocks;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let with = IntraModel::<f32>::new(toy(64, 5), &mut rng).map_err(|e| e.to_string())?;
    let without_cfg = ModelConfig {
        use_long_residuals: false,
        ..toy(64, 5)
    };
    let named: Vec<_> = with.names().iter().cloned().zip(with.params().iter().cloned()).collect();
    let without = IntraModel::<f32>::from_named(without_cfg, named).map_err(|e| e.to_string())?;
    let image = Image::from_fn(64, 64, 3, |_, _, _| rng.gen());
    let windows = sample_windows(&image, &toy(64, 5), 16, false, &mut rng).map_err(|e| e.to_string())?;
    let batch = WindowBatch::new(&windows, &toy(64, 5)).map_err(|e| e.to_string())?;
    let change = with
        .forward(&batch)
        .map_err(|e| e.to_string())?
        .max_abs_diff(&without.forward(&batch).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;

    let mut window_runs = Vec::new();
    for side in [5, 9] {
        let config = ModelConfig {
            patch_size: 4,
            window_side: side,
            latent_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            image_size: 48,
            channels: 3,
            use_mfsa: true,
            use_long_residuals: true,
        };
        let ds = generate_synthetic(&SynthConfig {
            seed: 1,
            train: 4,
            test_normal: 2,
            test_defect: 2,
            size: 48,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = IntraModel::<f32>::new(config, &mut rng).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            windows_per_image: 16,
            batch_size: 16,
            lr: 1e-3,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        train(&mut model, &ds.train, &tc, &mut rng, |_| {}).map_err(|e| format!("L={side}: {e}"))?;
        let reference = build_reference(&model, &ds.train, 64, 1).map_err(|e| format!("L={side}: {e}"))?;
        let r = evaluate_category(&model, &reference, &ds, 64, 1).map_err(|e| format!("L={side}: {e}"))?;
        let ok = [r.image_auc, r.pixel_auc].iter().all(|a| a.is_some_and(|v| (0.0..=1.0).contains(&v)));
        window_runs.push((side, ok));
    }
    check(
        delta == predicted && per_block == 1_050_112 && change > 0.0 && window_runs.iter().all(|r| r.1),
        format!(
            "MSA delta {delta} (predicted {predicted}, {per_block} per block), long-residual output change {change:.3e}, L=5/9 train+evaluate {:?}",
            window_runs
        ),
    )
}

fn persistence(t: &Result<Trained, String>) -> Outcome {
    let t = t.as_ref().map_err(Clone::clone)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.intc");
    let ckpt = Checkpoint::new(t.config.clone(), t.model.clone(), Some(t.reference.clone()));
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let bits_equal = loaded
        .model
        .params()
        .iter()
        .zip(t.model.params())
        .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
        && loaded.model.names() == t.model.names()
        && loaded.reference.as_ref().is_some_and(|r| r.count == t.reference.count && r.map.data().iter().zip(t.reference.map.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
        && loaded.config == ckpt.config;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let rewritten = Container::decode(&bytes).map_err(|e| e.to_string())?.encode().map_err(|e| e.to_string())?;
    let reference = loaded.reference().map_err(|e| e.to_string())?;
    let report = evaluate_category(&loaded.model, reference, &t.dataset, 64, 1).map_err(|e| e.to_string())?;
    let scores_equal = report.scores.len() == t.report.scores.len()
        && report.scores.iter().zip(&t.report.scores).all(|(a, b)| a.score.to_bits() == b.score.to_bits())
        && report.image_auc == t.report.image_auc
        && report.pixel_auc == t.report.pixel_auc;
    check(
        bits_equal && rewritten == bytes && scores_equal,
        format!(
            "{} bytes, tensors bit-identical {bits_equal}, re-encoding identical {}, reloaded scores identical {scores_equal}",
            bytes.len(),
            rewritten == bytes
        ),
    )
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => {
            println!("PASS acceptance {id:>2} {name}: {d} [{secs:.1}s]");
            true
        }
        Err(d) => {
            println!("FAIL acceptance {id:>2} {name}: {d} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    // test-harness arguments are ignored
    let mut ok = true;
    ok &= run(1, "gradient correctness", gradient_correctness);
    ok &= run(2, "parameter count", parameter_count);
    ok &= run(3, "overfit sanity", overfit);
    let start = Instant::now();
    let trained = catch_unwind(detection_setup).unwrap_or_else(|_| Err("training panicked".into()));
    let elapsed = start.elapsed();
    ok &= run(4, "desk-scale detection", || detection(&trained, elapsed));
    ok &= run(5, "window-selection oracle", window_oracle);
    ok &= run(6, "permutation invariance", permutation_invariance);
    ok &= run(7, "metric oracles", metric_oracles);
    ok &= run(8, "anomaly-map identities", anomaly_identities);
    ok &= run(9, "ablation plumbing", ablations);
    ok &= run(10, "persistence", || persistence(&trained));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
