//! Command-line entry point: one binary exposing the build / train / eval /
//! infer / bench / sweep / synth workflows.
//!
//! Every run prints its resolved configuration (including the seed) before
//! doing any work. Exit codes: 0 success, 1 usage error, 2 I/O or format
//! error, 3 numeric failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unet_core::bench::{emit_csv, measure_latency, run_stage_sweep, SweepOptions};
use unet_core::data::{
    crop_back, load_manifest, make_synthetic, pad_to_multiple, split_train_val, zscore, Sample,
};
use unet_core::model::{build_unet, count_flops, count_parameters, ModelConfig};
use unet_core::pgm::write_pgm;
use unet_core::serialize::{load_model, save_model};
use unet_core::train::{binarize, evaluate, fit, LossKind, TrainConfig};
use unet_core::{Error, Tensor};

#[derive(Parser)]
#[command(
    name = "unet",
    version,
    about = "Parameter-reduced U-Net toolkit for binary segmentation on the CPU",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-layer parameter table for a model configuration
    Params(ParamsArgs),
    /// Print per-layer multiply-accumulate counts for an input size
    Flops(FlopsArgs),
    /// Generate synthetic image/mask pairs plus a manifest
    Synth(SynthArgs),
    /// Train a model on a manifest dataset
    Train(TrainArgs),
    /// Evaluate a trained model on a manifest dataset
    Eval(EvalArgs),
    /// Segment one image with a trained model
    Infer(InferArgs),
    /// Measure eval-mode forward latency
    Bench(BenchArgs),
    /// Train one model per width and relate parameters to dice
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ModelFlags {
    /// Channels of the first encoder stage (doubles per level)
    #[arg(long, default_value_t = 8)]
    base_width: usize,
    /// Number of pooling stages
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Enable batch normalization (the default; kept for explicit scripts)
    #[arg(long)]
    batchnorm: bool,
    /// Disable batch normalization
    #[arg(long, conflicts_with = "batchnorm")]
    no_batchnorm: bool,
}

impl ModelFlags {
    fn to_config(&self) -> ModelConfig {
        ModelConfig {
            base_width: self.base_width,
            depth: self.depth,
            use_batchnorm: !self.no_batchnorm,
            ..ModelConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainFlags {
    /// Learning rate
    #[arg(long, default_value_t = 1e-5)]
    lr: f32,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Training loss: `dice` or `dice+bce`
    #[arg(long, default_value = "dice", value_parser = parse_loss)]
    loss: LossKind,
    /// Soft dice smoothing constant
    #[arg(long, default_value_t = 1.0)]
    smooth: f32,
    /// Mask binarization threshold
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

impl TrainFlags {
    fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss: self.loss,
            smooth: self.smooth,
            threshold: self.threshold,
            seed,
            ..TrainConfig::default()
        }
    }
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s {
        "dice" => Ok(LossKind::SoftDice),
        "dice+bce" => Ok(LossKind::DiceBce),
        other => Err(format!("unknown loss {other:?}, expected `dice` or `dice+bce`")),
    }
}

fn loss_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::SoftDice => "dice",
        LossKind::DiceBce => "dice+bce",
    }
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Square input extent
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Batch size of the accounted input
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples to generate
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Square image extent (multiple of 16)
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest of image<TAB>mask lines
    #[arg(long)]
    manifest: PathBuf,
    /// Separate validation manifest
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Fraction of the manifest held out for validation
    #[arg(long, default_value_t = 0.0, conflicts_with = "val_manifest")]
    val_fraction: f64,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Standardize each image to zero mean, unit variance
    #[arg(long)]
    zscore: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Weight file to write (best-validation checkpoint, or final model
    /// when no validation set is given)
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch metrics log to this file
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    zscore: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input raster (PGM P5 or ULT1 tensor)
    #[arg(long)]
    image: PathBuf,
    /// Output mask path (PGM P5 with values 0/255)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    zscore: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark a trained model instead of a fresh seeded one
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    model_flags: ModelFlags,
    /// Square input extent
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated ascending base widths, e.g. 8,16,24,32
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [8usize, 16, 24, 32])]
    widths: Vec<usize>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    val_fraction: f64,
    /// Number of pooling stages
    #[arg(long, default_value_t = 4)]
    depth: usize,
    /// Disable batch normalization
    #[arg(long)]
    no_batchnorm: bool,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    zscore: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Square extent for the MAC/latency probe input
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    iters: usize,
    /// Sweep CSV to write
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    let result = match cli.command {
        Command::Params(args) => cmd_params(args),
        Command::Flops(args) => cmd_flops(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Sweep(args) => cmd_sweep(args),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Usage(_) | Error::Config(_) => 1,
                Error::Io(_) | Error::Format(_) => 2,
                Error::Numeric(_) => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn print_model_config(cfg: &ModelConfig) {
    println!(
        "config: base_width={} depth={} in_channels={} out_channels={} batchnorm={}",
        cfg.base_width, cfg.depth, cfg.in_channels, cfg.out_channels, cfg.use_batchnorm
    );
}

fn print_train_config(cfg: &TrainConfig) {
    println!(
        "config: lr={} epochs={} batch_size={} loss={} smooth={} threshold={} seed={}",
        cfg.learning_rate,
        cfg.epochs,
        cfg.batch_size,
        loss_name(cfg.loss),
        cfg.smooth,
        cfg.threshold,
        cfg.seed
    );
}

fn cmd_params(args: ParamsArgs) -> unet_core::Result<()> {
    let cfg = args.model.to_config();
    print_model_config(&cfg);
    let model = build_unet(&cfg, 0)?;
    let report = count_parameters(&model);
    println!("{:<24} {:>12} {:>14}", "layer", "trainable", "non-trainable");
    for layer in &report.layers {
        println!("{:<24} {:>12} {:>14}", layer.name, layer.trainable, layer.non_trainable);
    }
    println!("trainable total: {}", report.trainable_total);
    println!("non-trainable total: {}", report.non_trainable_total);
    Ok(())
}

fn cmd_flops(args: FlopsArgs) -> unet_core::Result<()> {
    let cfg = args.model.to_config();
    print_model_config(&cfg);
    println!("config: size={} batch={}", args.size, args.batch);
    let report = count_flops(&cfg, [args.batch, cfg.in_channels, args.size, args.size])?;
    println!("{:<24} {:>16} {:>16}", "layer", "macs", "elementwise");
    for layer in &report.layers {
        println!("{:<24} {:>16} {:>16}", layer.name, layer.macs, layer.elementwise);
    }
    println!("total MACs: {}", report.total_macs);
    println!("total FLOPs: {}", report.total_flops);
    println!("total elementwise: {}", report.total_elementwise);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> unet_core::Result<()> {
    println!("config: count={} size={} seed={} out={}", args.count, args.size, args.seed, args.out.display());
    if args.count < 1 {
        return Err(Error::Usage("count must be >= 1".to_string()));
    }
    if args.size < 16 || args.size % 16 != 0 {
        return Err(Error::Usage(format!(
            "size must be a positive multiple of 16, got {}",
            args.size
        )));
    }
    fs::create_dir_all(&args.out)?;
    let samples = make_synthetic(args.count, args.size, args.seed);
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let image_name = format!("synth_{i:04}.pgm");
        let mask_name = format!("synth_{i:04}_mask.pgm");
        write_pgm(&args.out.join(&image_name), args.size, args.size, &to_bytes(&s.image))?;
        write_pgm(&args.out.join(&mask_name), args.size, args.size, &mask_bytes(&s.mask))?;
        manifest.push_str(&format!("{image_name}\t{mask_name}\n"));
    }
    let manifest_path = args.out.join("manifest.tsv");
    fs::write(&manifest_path, manifest)?;
    println!("wrote {} samples and {}", samples.len(), manifest_path.display());
    Ok(())
}

fn to_bytes(image: &Tensor) -> Vec<u8> {
    image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn mask_bytes(mask: &Tensor) -> Vec<u8> {
    mask.data().iter().map(|v| if *v >= 0.5 { 255 } else { 0 }).collect()
}

fn load_dataset(manifest: &Path, standardize: bool) -> unet_core::Result<Vec<Sample>> {
    let manifest = load_manifest(manifest)?;
    let mut samples = manifest.load_all()?;
    if standardize {
        for s in samples.iter_mut() {
            zscore(&mut s.image);
        }
    }
    Ok(samples)
}

fn cmd_train(args: TrainArgs) -> unet_core::Result<()> {
    let model_cfg = args.model.to_config();
    let train_cfg = args.train.to_config(args.seed);
    print_model_config(&model_cfg);
    print_train_config(&train_cfg);
    println!(
        "config: manifest={} val_manifest={} val_fraction={} zscore={} out={} metrics={}",
        args.manifest.display(),
        args.val_manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into()),
        args.val_fraction,
        args.zscore,
        args.out.display(),
        args.metrics.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into()),
    );

    let samples = load_dataset(&args.manifest, args.zscore)?;
    let (train_set, val_set) = if let Some(vm) = &args.val_manifest {
        (samples, load_dataset(vm, args.zscore)?)
    } else if args.val_fraction > 0.0 {
        split_train_val(samples, args.val_fraction, args.seed)?
    } else {
        (samples, Vec::new())
    };
    println!("dataset: {} train, {} val", train_set.len(), val_set.len());

    let mut model = build_unet(&model_cfg, args.seed)?;
    let mut sinks = MetricsSinks::new(args.metrics.as_deref())?;
    let outcome = fit(&mut model, &train_set, &val_set, &train_cfg, Some(&mut sinks))?;
    sinks.finish()?;

    if let (Some(epoch), Some(dice)) = (outcome.best_epoch, outcome.best_val_dice) {
        println!("best val dice: {dice} (epoch {epoch})");
    }
    let bytes = save_model(&outcome.best_model, &args.out)?;
    println!("saved checkpoint to {} ({bytes} bytes)", args.out.display());
    Ok(())
}

/// Tees metrics lines to stdout and optionally to a file.
struct MetricsSinks {
    file: Option<BufWriter<File>>,
}

impl MetricsSinks {
    fn new(path: Option<&Path>) -> unet_core::Result<MetricsSinks> {
        let file = match path {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        Ok(MetricsSinks { file })
    }

    fn finish(mut self) -> unet_core::Result<()> {
        if let Some(f) = self.file.as_mut() {
            f.flush()?;
        }
        Ok(())
    }
}

impl Write for MetricsSinks {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        if let Some(f) = self.file.as_mut() {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()?;
        if let Some(f) = self.file.as_mut() {
            f.flush()?;
        }
        Ok(())
    }
}

fn cmd_eval(args: EvalArgs) -> unet_core::Result<()> {
    println!(
        "config: model={} manifest={} threshold={} zscore={}",
        args.model.display(),
        args.manifest.display(),
        args.threshold,
        args.zscore
    );
    let model = load_model(&args.model)?;
    print_model_config(model.config());
    let samples = load_dataset(&args.manifest, args.zscore)?;
    let report = evaluate(&model, &samples, args.threshold)?;
    for (sample, dice) in samples.iter().zip(&report.per_image) {
        println!("{}\t{dice}", sample.source);
    }
    println!("count: {}", report.count);
    println!("mean dice: {}", report.mean);
    println!("max dice: {}", report.max);
    Ok(())
}

fn cmd_infer(args: InferArgs) -> unet_core::Result<()> {
    println!(
        "config: model={} image={} out={} threshold={} zscore={}",
        args.model.display(),
        args.image.display(),
        args.out.display(),
        args.threshold,
        args.zscore
    );
    let model = load_model(&args.model)?;
    print_model_config(model.config());

    let mut image = load_image(&args.image)?;
    if args.zscore {
        zscore(&mut image);
    }

    let (padded, rec) = pad_to_multiple(&image, model.config().spatial_multiple());
    let probs = model.forward_eval(&padded)?;
    let probs = crop_back(&probs, &rec);
    let mask = binarize(&probs, args.threshold);
    write_pgm(&args.out, mask.w(), mask.h(), &mask_bytes(&mask))?;
    println!("wrote mask {} ({}x{})", args.out.display(), mask.w(), mask.h());
    Ok(())
}

/// Load a standalone raster as a [0, 1] float tensor: PGM scaled by 1/255,
/// or a raw ULT1 tensor taken as-is.
fn load_image(path: &Path) -> unet_core::Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        let img = unet_core::pgm::read_pgm(path)?;
        let data: Vec<f32> = img.pixels.iter().map(|p| *p as f32 / 255.0).collect();
        Tensor::from_vec([1, 1, img.height, img.width], data)
    } else {
        let (_, t) = unet_core::serialize::read_tensor_file(path)?;
        Ok(t)
    }
}

fn cmd_bench(args: BenchArgs) -> unet_core::Result<()> {
    let (model, source) = match &args.model {
        Some(path) => (load_model(path)?, path.display().to_string()),
        None => {
            let cfg = args.model_flags.to_config();
            (build_unet(&cfg, args.seed)?, format!("fresh (seed {})", args.seed))
        }
    };
    print_model_config(model.config());
    println!(
        "config: model={source} size={} warmup={} iters={} seed={}",
        args.size, args.warmup, args.iters, args.seed
    );
    let shape = [1, model.config().in_channels, args.size, args.size];
    let stats = measure_latency(&model, shape, args.warmup, args.iters)?;
    for (i, ms) in stats.samples_ms.iter().enumerate() {
        println!("iter {i}: {ms} ms");
    }
    println!("mean_ms: {}", stats.mean_ms);
    println!("median_ms: {}", stats.median_ms);
    println!("p95_ms: {}", stats.p95_ms);
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> unet_core::Result<()> {
    let base_cfg = ModelConfig {
        depth: args.depth,
        use_batchnorm: !args.no_batchnorm,
        ..ModelConfig::default()
    };
    let train_cfg = args.train.to_config(args.seed);
    print_model_config(&base_cfg);
    print_train_config(&train_cfg);
    println!(
        "config: widths={:?} manifest={} val_fraction={} zscore={} size={} warmup={} iters={} out={}",
        args.widths,
        args.manifest.display(),
        args.val_fraction,
        args.zscore,
        args.size,
        args.warmup,
        args.iters,
        args.out.display()
    );

    let samples = load_dataset(&args.manifest, args.zscore)?;
    let (train_set, val_set) = split_train_val(samples, args.val_fraction, args.seed)?;
    println!("dataset: {} train, {} val", train_set.len(), val_set.len());

    let options = SweepOptions {
        probe_shape: [1, base_cfg.in_channels, args.size, args.size],
        warmup: args.warmup,
        iters: args.iters,
    };
    let records = run_stage_sweep(
        &args.widths,
        &train_set,
        &val_set,
        &base_cfg,
        &train_cfg,
        &options,
        Some(&args.out),
    )?;
    emit_csv(&records, &args.out)?;
    println!("stage,width,params,macs,mdc,val_loss,latency_ms");
    for r in &records {
        println!(
            "{},{},{},{},{},{},{}",
            r.stage, r.width, r.params, r.macs, r.mdc, r.val_loss, r.latency_ms
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
