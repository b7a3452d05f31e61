//! `moc` — train, evaluate, and run multicategory counting models, plus
//! synthetic data generation and a quick internal self-check.
//!
//! Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 I/O or
//! file-format failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use moc_core::counting::{self, DensityOptions, MetricReport, Point};
use moc_core::cssm::{self, CssBlock};
use moc_core::data::{self, Dataset, SceneSpec};
use moc_core::model::{Model, ModelConfig, INPUT_DIVISOR, OUTPUT_STRIDE};
use moc_core::nn::{AdamW, Graph, ParamStore, Tensor};
use moc_core::ssm::DiscreteSsm;
use moc_core::{MocError, Result};

#[derive(Parser)]
#[command(name = "moc", version, about = "Multicategory object counting with state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic counting dataset (colored discs on texture)
    GenData(GenDataArgs),
    /// Train a model on a dataset and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print metrics as CSV
    Eval(EvalArgs),
    /// Run one image through a checkpoint; write density maps and counts
    Predict(PredictArgs),
    /// Run fast internal consistency checks
    SelfCheck(SelfCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for images, annotations, and index.json
    #[arg(long)]
    out: PathBuf,
    /// Number of images to generate
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Image extent as HxW; both sides must be divisible by 16
    #[arg(long, default_value = "64x64")]
    size: String,
    /// Number of object categories
    #[arg(long, default_value_t = 6)]
    categories: usize,
    /// Mean number of objects per category (Poisson)
    #[arg(long, default_value_t = 8.0)]
    lambda: f64,
    /// Split name recorded in the index
    #[arg(long, default_value = "train")]
    split: String,
    /// RNG seed; the same seed reproduces the dataset byte for byte
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (containing index.json) or index file
    #[arg(long)]
    data: PathBuf,
    /// Where to write the final checkpoint
    #[arg(long)]
    out: PathBuf,
    /// JSON model config; the flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Learning rate
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    /// Decoupled weight decay
    #[arg(long, default_value_t = 1e-4)]
    wd: f64,
    /// Standard deviation of the ground-truth density splat, in pixels
    #[arg(long, default_value_t = 4.0)]
    sigma: f64,
    /// Square window side of the splat, in pixels (odd)
    #[arg(long, default_value_t = 15)]
    window: usize,
    /// Seed for weight init and batch shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override: backbone base channel width
    #[arg(long)]
    base_channels: Option<usize>,
    /// Override: state dimension of the selective scans
    #[arg(long)]
    state_size: Option<usize>,
    /// Override: blocks per backbone stage, as "a,b,c"
    #[arg(long)]
    depths: Option<String>,
    /// Override: architecture variant (baseline | cim | full)
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory (containing index.json) or index file
    #[arg(long)]
    data: PathBuf,
    /// JSON array of per-category weights for the weighted square error
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Weight all categories equally instead of reading --weights
    #[arg(long)]
    uniform: bool,
    /// Also write the metric CSV to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint to run
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (binary P6)
    #[arg(long)]
    image: PathBuf,
    /// Output directory for density_<k>.pgm maps and counts.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelfCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::SelfCheck(args) => cmd_self_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &MocError) -> u8 {
    match e {
        MocError::Argument(_) => 2,
        MocError::Numeric(_) | MocError::Shape(_) | MocError::State(_) => 3,
        MocError::Config(_) | MocError::Format(_) | MocError::Parse { .. } | MocError::Io(_) => 4,
    }
}

/// Parses "HxW" and checks both sides against the model's input divisor.
fn parse_size(text: &str) -> Result<(usize, usize)> {
    let (h, w) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| MocError::Argument(format!("--size must look like 64x64, got {text:?}")))?;
    let parse = |s: &str| -> Result<usize> {
        s.trim()
            .parse()
            .map_err(|_| MocError::Argument(format!("bad --size component {s:?}")))
    };
    let (h, w) = (parse(h)?, parse(w)?);
    for side in [h, w] {
        if side == 0 || side % INPUT_DIVISOR != 0 {
            return Err(MocError::Argument(format!(
                "--size sides must be positive multiples of {INPUT_DIVISOR}, got {h}x{w}"
            )));
        }
    }
    Ok((h, w))
}

/// Accepts either a dataset directory or the index file itself.
fn resolve_index(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("index.json")
    } else {
        data.to_path_buf()
    }
}

/// Worker count for evaluation: MOC_THREADS caps it, 0 or unset means one
/// worker per available core.
fn thread_count() -> Result<usize> {
    let auto = || std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("MOC_THREADS") {
        Err(_) => Ok(auto()),
        Ok(text) => match text.trim().parse::<usize>() {
            Ok(0) => Ok(auto()),
            Ok(n) => Ok(n),
            Err(_) => Err(MocError::Argument(format!("MOC_THREADS must be a number, got {text:?}"))),
        },
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let (height, width) = parse_size(&args.size)?;
    let spec = SceneSpec {
        height,
        width,
        categories: args.categories,
        mean_per_category: args.lambda,
    };
    let index = data::generate_dataset(&args.out, &spec, args.n, &args.split, args.seed)?;
    println!("{}", index.display());
    Ok(())
}

/// Builds the training config: file (if any), then flag overrides; the
/// category count always comes from the dataset.
fn training_config(args: &TrainArgs, categories: usize) -> Result<ModelConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| MocError::Format(format!("bad config {}: {e}", path.display())))?
        }
        None => ModelConfig::default(),
    };
    if let Some(c) = args.base_channels {
        config.base_channels = c;
    }
    if let Some(n) = args.state_size {
        config.state_size = n;
    }
    if let Some(text) = &args.depths {
        let parts: Vec<usize> = text
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| MocError::Argument(format!("--depths must look like 2,2,2, got {text:?}")))?;
        config.depths = parts
            .try_into()
            .map_err(|_| MocError::Argument("--depths needs exactly three values".into()))?;
    }
    if let Some(text) = &args.ablation {
        config.ablation = text.parse()?;
    }
    config.categories = categories;
    config.validate()?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if args.batch == 0 {
        return Err(MocError::Argument("--batch must be at least 1".into()));
    }
    let dataset = Dataset::load(&resolve_index(&args.data))?;
    let config = training_config(&args, dataset.categories())?;
    let mut model = Model::<f32>::new(config, args.seed)?;
    let mut optimizer = AdamW::new(args.lr, args.wd);

    if dataset.is_empty() && args.epochs > 0 {
        return Err(MocError::Config("cannot train on an empty dataset".into()));
    }

    // Desk-scale datasets fit in memory, so load images and build density
    // targets (pooled to the model's output stride) once up front.
    let samples: Vec<(Tensor<f32>, Tensor<f32>)> = (0..dataset.len())
        .map(|i| {
            let image = dataset.load_image::<f32>(i)?;
            let points = dataset.load_points(i)?;
            let (h, w) = (image.shape()[0], image.shape()[1]);
            let options = DensityOptions { sigma: args.sigma, window: args.window, ..DensityOptions::default() };
            let density = counting::gt_density::<f32>(&points, h, w, dataset.categories(), &options)?;
            let target = counting::sum_pool(&density, OUTPUT_STRIDE)?;
            Ok((image, target))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    println!("epoch,loss");
    for epoch in 1..=args.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(args.batch) {
            let images: Vec<Tensor<f32>> = chunk.iter().map(|&i| samples[i].0.clone()).collect();
            let targets: Vec<Tensor<f32>> = chunk.iter().map(|&i| samples[i].1.clone()).collect();
            let loss = model.train_step(&mut optimizer, &images, &targets)?;
            if !loss.is_finite() {
                return Err(MocError::Numeric(format!("loss became {loss} in epoch {epoch}")));
            }
            loss_sum += loss * chunk.len() as f64;
        }
        println!("{},{}", epoch, loss_sum / samples.len() as f64);
    }
    data::save_model(&args.out, &model, Some(&optimizer))?;
    Ok(())
}

/// Ground-truth per-category counts are just the number of annotated points.
fn count_points(points: &[Point], categories: usize) -> Vec<f64> {
    let mut counts = vec![0.0; categories];
    for p in points {
        counts[p.category] += 1.0;
    }
    counts
}

/// Predicts counts for every dataset image, fanned out over scoped worker
/// threads. Results come back indexed, so the output order is stable no
/// matter how the workers interleave.
fn predict_counts(model: &Model<f32>, dataset: &Dataset, workers: usize) -> Result<Vec<Vec<f64>>> {
    let n = dataset.len();
    let workers = workers.clamp(1, n.max(1));
    let mut per_image: Vec<Option<Vec<f64>>> = vec![None; n];
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || -> Result<Vec<(usize, Vec<f64>)>> {
                    (w..n)
                        .step_by(workers)
                        .map(|i| {
                            let image = dataset.load_image::<f32>(i)?;
                            let density = model.predict(&image)?;
                            Ok((i, counting::counts_from_density(&density)?))
                        })
                        .collect()
                })
            })
            .collect();
        for handle in handles {
            for (i, counts) in handle.join().expect("evaluation worker panicked")? {
                per_image[i] = Some(counts);
            }
        }
        Ok(())
    })?;
    Ok(per_image.into_iter().map(|c| c.expect("every image visited")).collect())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (model, _) = data::load_model::<f32>(&args.ckpt)?;
    let dataset = Dataset::load(&resolve_index(&args.data))?;
    let categories = model.config().categories;
    if dataset.categories() != categories {
        return Err(MocError::Config(format!(
            "checkpoint was trained for {categories} categories but the dataset has {}",
            dataset.categories()
        )));
    }
    if dataset.is_empty() {
        return Err(MocError::Config("cannot evaluate on an empty dataset".into()));
    }
    let weights: Option<Vec<f64>> = match (&args.weights, args.uniform) {
        (Some(_), true) => {
            return Err(MocError::Argument("pass either --weights or --uniform, not both".into()))
        }
        (Some(path), false) => {
            let text = fs::read_to_string(path)?;
            let w: Vec<f64> = serde_json::from_str(&text)
                .map_err(|e| MocError::Format(format!("bad weights {}: {e}", path.display())))?;
            if w.len() != categories {
                return Err(MocError::Config(format!(
                    "weights file has {} entries but the model counts {categories} categories",
                    w.len()
                )));
            }
            Some(w)
        }
        (None, true) => None,
        (None, false) if categories == 1 => None,
        (None, false) => {
            return Err(MocError::Argument(
                "multi-category evaluation needs --weights FILE or --uniform".into(),
            ))
        }
    };

    let predicted = predict_counts(&model, &dataset, thread_count()?)?;
    let actual: Vec<Vec<f64>> = (0..dataset.len())
        .map(|i| Ok(count_points(&dataset.load_points(i)?, categories)))
        .collect::<Result<_>>()?;
    let report = match weights {
        Some(w) => MetricReport::from_counts_weighted(&predicted, &actual, &w)?,
        None => MetricReport::from_counts(&predicted, &actual)?,
    };
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(out) = &args.out {
        fs::write(out, &csv)?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (model, _) = data::load_model::<f32>(&args.ckpt)?;
    let image = data::read_ppm::<f32>(&args.image)?;
    let density = model.predict(&image)?;
    let (h, w, categories) = (density.shape()[0], density.shape()[1], density.shape()[2]);
    fs::create_dir_all(&args.out)?;
    for k in 0..categories {
        let plane = Tensor::<f32>::from_fn(&[h, w], |i| density.data()[i * categories + k]);
        data::write_pgm_normalized(&args.out.join(format!("density_{k}.pgm")), &plane)?;
    }
    let counts = counting::counts_from_density(&density)?;
    let mut csv = String::from("category,count\n");
    for (k, count) in counts.iter().enumerate() {
        csv.push_str(&format!("{k},{count}\n"));
    }
    fs::write(args.out.join("counts.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Small fast subset of the library's invariants, runnable in the field to
/// confirm a build behaves: discretization anchors, scan-path agreement,
/// context-block reduction, density mass conservation, and a forward pass.
fn cmd_self_check(args: SelfCheckArgs) -> Result<()> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let check = |ok: bool, what: &str| -> Result<()> {
        if ok {
            println!("ok - {what}");
            Ok(())
        } else {
            Err(MocError::Numeric(format!("self-check failed: {what}")))
        }
    };

    let (a_bar, b_bar) = moc_core::ssm::discretize(&[-1.0f64], &[2.0], std::f64::consts::LN_2)?;
    check(
        (a_bar[0] - 0.5).abs() < 1e-9 && (b_bar[0] - 1.0).abs() < 1e-9,
        "zero-order-hold discretization anchor",
    )?;

    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.gen_range(1..=4);
        let len = rng.gen_range(1..=32);
        let a: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.05..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ssm = DiscreteSsm::from_continuous_lti(len, &a, &b, &c, 0.1)?;
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (yr, yp, yk) = (ssm.scan_recurrent(&x)?, ssm.scan_parallel(&x)?, ssm.scan_kernel_conv(&x)?);
        for i in 0..len {
            worst = worst.max((yr[i] - yp[i]).abs()).max((yr[i] - yk[i]).abs());
        }
    }
    check(worst < 1e-10, "recurrent, parallel, and kernel scans agree")?;

    let mut plain_store = ParamStore::<f64>::new();
    let mut ctx_store = ParamStore::<f64>::new();
    let plain = CssBlock::new(&mut plain_store, &mut ChaCha8Rng::seed_from_u64(args.seed), "blk", 4, 2, false);
    let ctx = CssBlock::new(&mut ctx_store, &mut ChaCha8Rng::seed_from_u64(args.seed), "blk", 4, 2, true);
    cssm::zero_params_with_prefix(&mut ctx_store, "blk.context");
    let x = Tensor::<f64>::from_fn(&[8, 8, 4], |i| ((i * 37 % 101) as f64 / 50.5) - 1.0);
    let mut g1 = Graph::eval(&plain_store);
    let x1 = g1.constant(x.clone())?;
    let y1 = plain.forward(&mut g1, x1)?;
    let mut g2 = Graph::eval(&ctx_store);
    let x2 = g2.constant(x)?;
    let y2 = ctx.forward(&mut g2, x2)?;
    check(
        g1.value(y1).data() == g2.value(y2).data(),
        "zeroed context block matches the plain block bitwise",
    )?;

    let points: Vec<Point> = (0..40)
        .map(|_| Point {
            x: rng.gen_range(0.0..64.0),
            y: rng.gen_range(0.0..48.0),
            category: rng.gen_range(0..3),
        })
        .collect();
    let density = counting::gt_density::<f64>(&points, 48, 64, 3, &DensityOptions::default())?;
    let counts = counting::counts_from_density(&density)?;
    let truth = count_points(&points, 3);
    let mass_ok = counts.iter().zip(&truth).all(|(c, t)| (c - t).abs() < 1e-6);
    check(mass_ok, "density mass equals annotation count per category")?;

    let config = ModelConfig {
        base_channels: 8,
        state_size: 4,
        categories: 3,
        depths: [1, 1, 1],
        ablation: moc_core::model::Ablation::Full,
    };
    let model = Model::<f32>::new(config, args.seed)?;
    let image = Tensor::<f32>::from_fn(&[32, 32, 3], |i| (i % 255) as f32 / 255.0);
    let out = model.predict(&image)?;
    check(
        out.shape() == [8, 8, 3] && out.data().iter().all(|v| v.is_finite() && *v >= 0.0),
        "full model forward produces a finite non-negative density",
    )?;

    println!("all checks passed");
    Ok(())
}
