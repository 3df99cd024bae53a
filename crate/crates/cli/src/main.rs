//! `intra` command-line tool.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use intra_core::checkpoint::Checkpoint;
use intra_core::config::RunConfig;
use intra_core::data::{
    category_size, generate_synthetic, load_category, load_image, save_png, triptych, write_dataset, SynthConfig,
    SYNTH_CATEGORY,
};
use intra_core::evaluator::{evaluate_category, score_maps, test_maps};
use intra_core::gradcheck::{model_gradient_check, toy_config, DEFAULT_FLOOR, DEFAULT_STEP};
use intra_core::metrics::LossWeights;
use intra_core::model::IntraModel;
use intra_core::scoring::{anomaly_map, build_reference, reconstruct_image};
use intra_core::training::{select_image_size, train, EpochRecord};
use intra_core::{IntraError, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gradient-check pass threshold.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "intra", version, about = "Inpainting transformer for visual anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// File of `key = value` lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores [default: 1]
    #[arg(long, env = "INTRA_WORKERS")]
    workers: Option<usize>,
    /// Single worker, bit-reproducible output
    #[arg(long)]
    deterministic: bool,
    /// Patches per inference batch
    #[arg(long, default_value_t = 256)]
    inference_batch: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a category and write a checkpoint with its reference map
    Train {
        /// Dataset root holding `<category>/train`, `test`, `ground_truth`
        #[arg(long)]
        data: PathBuf,
        /// Category directory name
        #[arg(long)]
        category: String,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Epoch history CSV [default: <out>.history.csv]
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct one image and write its anomaly map
    Reconstruct {
        /// Checkpoint file
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (PNG)
        #[arg(long)]
        image: PathBuf,
        /// Output directory
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a category's test set
    Evaluate {
        /// Checkpoint file
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root holding `<category>/train`, `test`, `ground_truth`
        #[arg(long)]
        data: PathBuf,
        /// Category directory name
        #[arg(long)]
        category: String,
        /// Report output path
        #[arg(long)]
        report: PathBuf,
        /// Per-image score table
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Directory for original | reconstruction | heat map images
        #[arg(long)]
        triptychs: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare backpropagated and finite-difference gradients of a toy model
    Gradcheck {
        /// Windows in the evaluation batch
        #[arg(long, default_value_t = 3)]
        windows: usize,
        /// Central-difference step
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        /// Gradient-magnitude loss weight
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        /// Structural-similarity loss weight
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Write a seeded synthetic texture dataset in the MVTec AD layout
    Synth {
        /// Dataset root to write into
        #[arg(long)]
        out: PathBuf,
        /// Normal training images
        #[arg(long, default_value_t = 20)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        test_normal: usize,
        #[arg(long, default_value_t = 10)]
        test_defect: usize,
        /// Image side in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Pick the smallest image size whose successor does not lower the validation loss
    SelectSize {
        /// Dataset root holding `<category>/train`, `test`, `ground_truth`
        #[arg(long)]
        data: PathBuf,
        /// Category directory name
        #[arg(long)]
        category: String,
        /// Ascending candidate sizes
        #[arg(long, value_delimiter = ',', default_value = "256,320,512")]
        sizes: Vec<usize>,
        /// Epochs per candidate
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Defaults, then the category's working size, then the file, then flags.
fn run_config(common: &Common, category: Option<&str>) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(size) = category.and_then(category_size) {
        config.model.image_size = size;
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| IntraError::Io {
            path: path.clone(),
            source: e,
        })?;
        config.apply(&text)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| IntraError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(workers) = common.workers {
        config.workers = workers;
    }
    config.deterministic |= common.deterministic;
    config.validate()?;
    Ok(config)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| IntraError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| IntraError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_train(data: &Path, category: &str, out: &Path, history: Option<PathBuf>, common: &Common) -> Result<()> {
    let mut config = run_config(common, Some(category))?;
    config.model.channels = intra_core::data::CHANNELS;
    let workers = config.effective_workers();
    let ds = load_category(data, category, config.model.image_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = IntraModel::<f32>::new(config.model, &mut rng)?;
    let mut lines = vec![EpochRecord::CSV_HEADER.to_string()];
    println!("{}", EpochRecord::CSV_HEADER);
    let outcome = train(&mut model, &ds.train, &config.train, &mut rng, |r| {
        println!("{}", r.csv());
        let _ = std::io::stdout().flush();
        lines.push(r.csv());
    })?;
    let history = history.unwrap_or_else(|| PathBuf::from(format!("{}.history.csv", out.display())));
    write_file(&history, &(lines.join("\n") + "\n"))?;
    let train_images: Vec<_> = outcome.train_indices.iter().map(|&i| ds.train[i].clone()).collect();
    let reference = build_reference(&model, &train_images, common.inference_batch, workers)?;
    Checkpoint::new(config, model, Some(reference)).save(out)?;
    println!("best_epoch = {}", outcome.best_epoch);
    println!("best_loss = {}", outcome.best_loss);
    println!("checkpoint = {}", out.display());
    Ok(())
}

fn cmd_reconstruct(ckpt: &Path, image: &Path, out_dir: &Path, common: &Common) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let reference = ckpt.reference()?;
    let size = ckpt.model.config().image_size;
    let original = load_image(image)?;
    let input = original.resize_bilinear(size, size);
    let recon = reconstruct_image(&ckpt.model, &input, common.inference_batch)?;
    let map = anomaly_map(&ckpt.model, &input, Some(reference), common.inference_batch)?;
    create_dir(out_dir)?;
    let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let (h, w) = (original.height(), original.width());
    let scale = map.map.max();
    save_png(&recon.resize_bilinear(h, w), &out_dir.join(format!("{stem}_reconstruction.png")))?;
    save_png(&intra_core::data::heat_map(&map.resized(h, w), scale), &out_dir.join(format!("{stem}_anomaly.png")))?;
    save_png(
        &triptych(&original, &recon.resize_bilinear(h, w), &map.map, scale)?,
        &out_dir.join(format!("{stem}_triptych.png")),
    )?;
    println!("score = {}", map.score);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    ckpt: &Path,
    data: &Path,
    category: &str,
    report_path: &Path,
    csv: Option<PathBuf>,
    triptychs: Option<PathBuf>,
    common: &Common,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let reference = ckpt.reference()?;
    let mut config = ckpt.config.clone();
    if let Some(w) = common.workers {
        config.workers = w;
    }
    config.deterministic |= common.deterministic;
    let workers = config.effective_workers();
    let ds = load_category(data, category, ckpt.model.config().image_size)?;
    let mut report = if let Some(dir) = &triptychs {
        let start = std::time::Instant::now();
        let maps = test_maps(&ckpt.model, reference, &ds, common.inference_batch, workers)?;
        let mut report = score_maps(&ds, &maps)?;
        report.runtime_seconds = start.elapsed().as_secs_f64();
        let scale = maps.iter().map(|m| m.map.max()).fold(0.0f32, f32::max);
        for (s, m) in ds.test.iter().zip(&maps) {
            let recon = reconstruct_image(&ckpt.model, &s.image, common.inference_batch)?;
            let img = triptych(&s.image, &recon, &m.map, scale)?;
            save_png(&img, &dir.join(&s.defect).join(format!("{}.png", s.name)))?;
        }
        report
    } else {
        evaluate_category(&ckpt.model, reference, &ds, common.inference_batch, workers)?
    };
    report.config_text = config.to_text();
    report.write(report_path)?;
    if let Some(csv) = csv {
        report.write_csv(&csv)?;
    }
    let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.6}"));
    println!("image_auc = {}", show(report.image_auc));
    println!("pixel_auc = {}", show(report.pixel_auc));
    println!("report = {}", report_path.display());
    Ok(())
}

fn cmd_gradcheck(windows: usize, step: f64, alpha: f64, beta: f64, common: &Common) -> Result<()> {
    let config = run_config(common, None)?;
    let model = toy_config();
    println!(
        "toy model: K={} L={} D={} blocks={} heads={} C={} (64-bit)",
        model.patch_size, model.window_side, model.latent_dim, model.num_blocks, model.num_heads, model.channels
    );
    let r = model_gradient_check(model, windows, LossWeights { alpha, beta }, config.seed, step, DEFAULT_FLOOR)?;
    println!("parameters = {}", r.num_parameters);
    println!("loss = {}", r.loss);
    println!("worst_tensor = {}", r.worst_tensor);
    println!("max_coordinate_error = {:.6e}", r.max_coordinate_error);
    println!("max_relative_error = {:.6e}", r.max_relative_error);
    if r.max_relative_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(IntraError::Invalid(format!(
            "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e} in {}",
            r.max_relative_error, r.worst_tensor
        )))
    }
}

fn cmd_synth(out: &Path, synth: SynthConfig, common: &Common) -> Result<()> {
    let config = run_config(common, None)?;
    let ds = generate_synthetic(&SynthConfig { seed: config.seed, ..synth });
    write_dataset(&ds, out)?;
    println!("category = {SYNTH_CATEGORY}");
    println!("path = {}", out.join(SYNTH_CATEGORY).display());
    Ok(())
}

fn cmd_select_size(data: &Path, category: &str, sizes: &[usize], epochs: usize, common: &Common) -> Result<()> {
    let mut config = run_config(common, Some(category))?;
    config.model.channels = intra_core::data::CHANNELS;
    let load = |size: usize| Ok(load_category(data, category, size)?.train);
    let sel = select_image_size(load, config.model, &config.train, sizes, epochs, config.seed)?;
    for (size, loss) in &sel.losses {
        println!("loss_{size} = {loss}");
    }
    println!("image_size = {}", sel.chosen);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Train { common, .. }
        | Command::Reconstruct { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Gradcheck { common, .. }
        | Command::Synth { common, .. }
        | Command::SelectSize { common, .. } => common.clone(),
    };
    // rayon reads 0 as one thread per core
    let threads = if common.deterministic { 1 } else { common.workers.unwrap_or(1) };
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cli.command {
        Command::Train {
            data,
            category,
            out,
            history,
            common,
        } => cmd_train(&data, &category, &out, history, &common),
        Command::Reconstruct {
            ckpt,
            image,
            out_dir,
            common,
        } => cmd_reconstruct(&ckpt, &image, &out_dir, &common),
        Command::Evaluate {
            ckpt,
            data,
            category,
            report,
            csv,
            triptychs,
            common,
        } => cmd_evaluate(&ckpt, &data, &category, &report, csv, triptychs, &common),
        Command::Gradcheck {
            windows,
            step,
            alpha,
            beta,
            common,
        } => cmd_gradcheck(windows, step, alpha, beta, &common),
        Command::Synth {
            out,
            train,
            test_normal,
            test_defect,
            size,
            common,
        } => cmd_synth(
            &out,
            SynthConfig {
                seed: 0,
                train,
                test_normal,
                test_defect,
                size,
            },
            &common,
        ),
        Command::SelectSize {
            data,
            category,
            sizes,
            epochs,
            common,
        } => cmd_select_size(&data, &category, &sizes, epochs, &common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let kind = e.kind();
            let msg = msg.strip_prefix(&format!("{kind}: ")).unwrap_or(&msg);
            eprintln!("intra: error: {kind}: {msg}");
            ExitCode::FAILURE
        }
    }
}
