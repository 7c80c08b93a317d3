//! Command-line frontend: train codecs on the synthetic corpus, compress and
//! decompress images through .nzip containers, dump quantized latents, train
//! frozen-latent classifier heads, and sweep rate-distortion curves.
//!
//! Every command is a deterministic function of its flags; all randomness is
//! funneled through seeds. Exit code 0 means every output was written and all
//! internal contracts held; missing or unreadable files exit with 2, other
//! failures with 1.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nzip::codec::CodecModel;
use nzip::container::{compress, decode_latents, decompress, hex, pad_to_multiple, CompressedImage};
use nzip::data::{batch_tensor, make_synthetic_dataset, SyntheticSample};
use nzip::entropy::{quantize_round, QuantizedLatent};
use nzip::error::{NzipError, Result};
use nzip::imageio::{load_image, save_image};
use nzip::losses::psnr;
use nzip::task::{
    parse_activation, save_head, train_downstream, DownstreamConfig, StemConfig, StemVariant,
};
use nzip::train::{batch_accuracy, train, write_log_csv, TrainConfig};
use nzip::weights::{
    collect_model_entries, decode_entries, digest16, encode_entries, load_model,
    model_from_entries, save_model,
};

#[derive(Parser)]
#[command(name = "nzip", version, about = "Learned image codec with latent-space task heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec (and, with lambda_t > 0, a joint task head)
    Train(TrainArgs),
    /// Compress a PPM or PNG image into a .nzip container
    Compress(CompressArgs),
    /// Decode a .nzip container back to an image
    Decompress(DecompressArgs),
    /// Dump quantized latents as CSV, from an image or a .nzip container
    Latent(LatentArgs),
    /// Train a classifier head on frozen latents and report held-out accuracy
    EvalDownstream(EvalDownstreamArgs),
    /// Train one codec per lambda_d and tabulate bpp, PSNR, and task accuracy
    RdCurve(RdCurveArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; defaults apply when omitted
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a single config key, e.g. --set lambda_d=0.3 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output path for the trained codec weights
    #[arg(long, value_name = "FILE.nzwt")]
    model_out: PathBuf,
    /// Output path for the per-epoch CSV log
    #[arg(long, value_name = "FILE.csv")]
    log_out: Option<PathBuf>,
    /// Output path for the task head weights
    #[arg(long, value_name = "FILE.nzwt")]
    head_out: Option<PathBuf>,
    /// Suppress per-epoch progress lines
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct CompressArgs {
    /// Codec weight file
    #[arg(long, value_name = "FILE.nzwt")]
    model: PathBuf,
    /// Input image (.ppm or .png)
    #[arg(long = "in", value_name = "IMAGE")]
    input: PathBuf,
    /// Output container
    #[arg(long, value_name = "FILE.nzip")]
    out: PathBuf,
    /// Print rate statistics and wall time
    #[arg(long)]
    stats: bool,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long, value_name = "FILE.nzwt")]
    model: PathBuf,
    #[arg(long = "in", value_name = "FILE.nzip")]
    input: PathBuf,
    /// Output image (.ppm or .png)
    #[arg(long, value_name = "IMAGE")]
    out: PathBuf,
}

#[derive(Args)]
struct LatentArgs {
    #[arg(long, value_name = "FILE.nzwt")]
    model: PathBuf,
    /// A .nzip container (decoded latents) or an image (freshly encoded ones)
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// CSV destination; stdout when omitted
    #[arg(long, value_name = "FILE.csv")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalDownstreamArgs {
    /// Frozen codec weight file
    #[arg(long, value_name = "FILE.nzwt")]
    model: PathBuf,
    /// Stem variant: subpixel or truncated
    #[arg(long, default_value = "subpixel")]
    stem: String,
    #[arg(long, default_value_t = 2)]
    pixel_shuffle_blocks: usize,
    /// Drop the 1x1-conv residual path of the subpixel stem
    #[arg(long)]
    no_residual: bool,
    /// Stem activation: relu, mish, or silu
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 64)]
    feature_channels: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 128)]
    dataset_size: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Fraction of the dataset held out for the reported accuracy
    #[arg(long, default_value_t = 0.25)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset seed; derived from --seed when omitted
    #[arg(long)]
    data_seed: Option<u64>,
    /// Output path for the trained head
    #[arg(long, value_name = "FILE.nzwt")]
    head_out: Option<PathBuf>,
}

#[derive(Args)]
struct RdCurveArgs {
    /// key=value base config shared by every sweep point
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Comma-separated lambda_d sweep, e.g. 0.05,0.3,1.8
    #[arg(long, value_name = "LIST")]
    lambdas: String,
    /// Override lambda_t for every sweep point
    #[arg(long)]
    lambda_t: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Images compressed per point for the bpp and PSNR columns
    #[arg(long, default_value_t = 8)]
    eval_images: usize,
    /// Output CSV: lambda_d,lambda_t,bpp,psnr,task_acc
    #[arg(long, value_name = "FILE.csv")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::Latent(a) => cmd_latent(a),
        Command::EvalDownstream(a) => cmd_eval_downstream(a),
        Command::RdCurve(a) => cmd_rd_curve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                NzipError::Io(_) => 2,
                _ => 1,
            })
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(NzipError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )))
    }
}

/// Builds a training config from an optional file plus `--set` overrides.
/// Overrides are appended as extra lines, so later keys win.
fn merged_config(config: &Option<PathBuf>, set: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut text = String::new();
    if let Some(path) = config {
        require_file(path)?;
        text = std::fs::read_to_string(path)?;
    }
    for kv in set {
        text.push('\n');
        text.push_str(kv);
    }
    let mut cfg = TrainConfig::from_key_values(&text)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = merged_config(&args.config, &args.set, args.seed)?;
    let start = Instant::now();
    let mut outcome = train(&cfg)?;
    if !args.quiet {
        for e in &outcome.log {
            println!(
                "epoch {}: bpp {:.4} mse {:.6} psnr {:.2} task_loss {:.4} task_acc {:.4}",
                e.epoch, e.bpp_estimate, e.mse, e.psnr, e.task_loss, e.task_acc
            );
        }
    }
    let digest = save_model(&mut outcome.model, &args.model_out)?;
    println!("model: {} ({})", args.model_out.display(), hex(&digest));
    if let Some(path) = &args.log_out {
        write_log_csv(path, &outcome.log)?;
        println!("log: {}", path.display());
    }
    if let Some(path) = &args.head_out {
        save_head(&mut outcome.head, digest, path)?;
        println!("head: {}", path.display());
    }
    println!("wall_time_ms: {}", start.elapsed().as_millis());
    Ok(())
}

fn cmd_compress(args: CompressArgs) -> Result<()> {
    require_file(&args.model)?;
    require_file(&args.input)?;
    let (model, digest) = load_model(&args.model)?;
    let img = load_image(&args.input)?;
    let start = Instant::now();
    let (container, stats) = compress(&model, digest, &img)?;
    let bytes = container.to_bytes();
    std::fs::write(&args.out, &bytes)?;
    println!("wrote {} ({} bytes)", args.out.display(), bytes.len());
    if args.stats {
        println!("bpp: {:.12}", stats.bpp);
        println!(
            "estimated_rate_bits: {:.2}",
            stats.latent_table_bits + stats.hyper_table_bits
        );
        println!("latent_payload_bits: {}", stats.latent_payload_bits);
        println!("hyper_payload_bits: {}", stats.hyper_payload_bits);
        println!("clamped_elements: {}", stats.latent_clamped + stats.hyper_clamped);
        println!("wall_time_ms: {}", start.elapsed().as_millis());
    }
    Ok(())
}

fn cmd_decompress(args: DecompressArgs) -> Result<()> {
    require_file(&args.model)?;
    require_file(&args.input)?;
    let (model, digest) = load_model(&args.model)?;
    let container = CompressedImage::from_bytes(&std::fs::read(&args.input)?)?;
    let img = decompress(&model, digest, &container)?;
    save_image(&img, &args.out)?;
    println!("wrote {} ({}x{})", args.out.display(), img.width, img.height);
    Ok(())
}

fn quantized_rows(csv: &mut String, name: &str, q: &QuantizedLatent) {
    let (c, h, w) = (q.shape[1], q.shape[2], q.shape[3]);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                writeln!(csv, "{name},{ci},{y},{x},{}", q.values[(ci * h + y) * w + x]).unwrap();
            }
        }
    }
}

fn cmd_latent(args: LatentArgs) -> Result<()> {
    require_file(&args.model)?;
    require_file(&args.input)?;
    let (model, _) = load_model(&args.model)?;
    let nzip_input = args.input.extension().is_some_and(|e| e == "nzip");
    let (z_quant, w_quant) = if nzip_input {
        let container = CompressedImage::from_bytes(&std::fs::read(&args.input)?)?;
        let (w, z) = decode_latents(&model, &container)?;
        (z, w)
    } else {
        let img = load_image(&args.input)?;
        encode_fresh_latents(&model, &img)?
    };
    let mut csv = String::from("tensor,c,y,x,value\n");
    quantized_rows(&mut csv, "z", &z_quant);
    quantized_rows(&mut csv, "w", &w_quant);
    match &args.out {
        Some(path) => {
            std::fs::write(path, csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Rounded latents straight from the analysis transforms, before any window
/// clamping the entropy tables would apply.
fn encode_fresh_latents(
    model: &CodecModel,
    img: &nzip::imageio::Image,
) -> Result<(QuantizedLatent, QuantizedLatent)> {
    nzip_tensor::no_grad(|| {
        let x = pad_to_multiple(img).to_tensor();
        let z = model.encode_latent(&x)?;
        let w = model.hyper_encode(&z)?;
        Ok((quantize_round(&z)?, quantize_round(&w)?))
    })
}

fn cmd_eval_downstream(args: EvalDownstreamArgs) -> Result<()> {
    require_file(&args.model)?;
    let (mut model, digest) = load_model(&args.model)?;
    let variant = match args.stem.as_str() {
        "subpixel" => StemVariant::Subpixel,
        "truncated" => StemVariant::Truncated,
        other => {
            return Err(NzipError::Config(format!(
                "unknown stem {other:?} (expected subpixel or truncated)"
            )))
        }
    };
    let stem = StemConfig {
        variant,
        pixel_shuffle_blocks: args.pixel_shuffle_blocks,
        use_residual_block: !args.no_residual,
        activation: parse_activation(&args.activation)?,
    };
    let data_seed = args.data_seed.unwrap_or(args.seed ^ 0x9e37_79b9_7f4a_7c15);
    let dataset =
        make_synthetic_dataset(data_seed, args.classes, args.dataset_size, args.image_size)?;
    let cfg = DownstreamConfig {
        stem,
        feature_channels: args.feature_channels,
        classes: args.classes,
        lr: args.lr,
        epochs: args.epochs,
        batch: args.batch,
        seed: args.seed,
        holdout: args.holdout,
    };
    let start = Instant::now();
    let (mut head, acc) = train_downstream(&mut model, &dataset, &cfg)?;
    println!("holdout_accuracy: {:.4}", acc);
    if let Some(path) = &args.head_out {
        save_head(&mut head, digest, path)?;
        println!("head: {}", path.display());
    }
    println!("wall_time_ms: {}", start.elapsed().as_millis());
    Ok(())
}

struct RdRow {
    lambda_d: f64,
    lambda_t: f64,
    bpp: f64,
    psnr: f64,
    task_acc: f64,
}

fn cmd_rd_curve(args: RdCurveArgs) -> Result<()> {
    let mut base = merged_config(&args.config, &args.set, args.seed)?;
    if let Some(lt) = args.lambda_t {
        base.lambda_t = lt;
    }
    let mut lambdas = Vec::new();
    for part in args.lambdas.split(',') {
        let v: f64 = part
            .trim()
            .parse()
            .map_err(|_| NzipError::Config(format!("bad lambda value {:?}", part.trim())))?;
        if !v.is_finite() || v < 0.0 {
            return Err(NzipError::Config(format!("lambda_d must be finite and >= 0, got {v}")));
        }
        lambdas.push(v);
    }
    if lambdas.is_empty() {
        return Err(NzipError::Config("empty lambda sweep".into()));
    }
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let threads = std::env::var("NZIP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .clamp(1, lambdas.len());
    let chunk_len = lambdas.len().div_ceil(threads);

    let rows: Vec<Result<RdRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = lambdas
            .chunks(chunk_len)
            .map(|chunk| {
                let base = base.clone();
                scope.spawn(move || {
                    chunk.iter().map(|&l| rd_point(&base, l, args.eval_images)).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
    });

    let mut csv = String::from("lambda_d,lambda_t,bpp,psnr,task_acc\n");
    for row in rows {
        let r = row?;
        let line = format!(
            "{},{},{:.6},{:.4},{:.4}",
            r.lambda_d, r.lambda_t, r.bpp, r.psnr, r.task_acc
        );
        println!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    }
    std::fs::write(&args.out, csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

/// One sweep point. Divergence becomes a NaN row so the sweep continues;
/// anything else aborts the whole command.
fn rd_point(base: &TrainConfig, lambda_d: f64, eval_images: usize) -> Result<RdRow> {
    let mut cfg = base.clone();
    cfg.lambda_d = lambda_d;
    match rd_point_measurements(&cfg, eval_images) {
        Ok((bpp, psnr, task_acc)) => {
            Ok(RdRow { lambda_d, lambda_t: cfg.lambda_t, bpp, psnr, task_acc })
        }
        Err(NzipError::Divergence(msg)) => {
            eprintln!("rd-curve: lambda_d={lambda_d} diverged: {msg}");
            Ok(RdRow {
                lambda_d,
                lambda_t: cfg.lambda_t,
                bpp: f64::NAN,
                psnr: f64::NAN,
                task_acc: f64::NAN,
            })
        }
        Err(e) => Err(e),
    }
}

/// Trains one codec, then measures it exactly as a user would: weights pushed
/// through storage precision, images run through the full container round
/// trip. Accuracy is evaluated on the whole training corpus (the sweep only
/// compares operating points, not generalization).
fn rd_point_measurements(cfg: &TrainConfig, eval_images: usize) -> Result<(f64, f64, f64)> {
    let mut outcome = train(cfg)?;
    let bytes = encode_entries(&collect_model_entries(&mut outcome.model))?;
    let digest = digest16(&bytes);
    let deployed = model_from_entries(&decode_entries(&bytes)?)?;

    let n = eval_images.clamp(1, outcome.dataset.len());
    let (mut bpp_sum, mut psnr_sum) = (0.0, 0.0);
    for sample in outcome.dataset.iter().take(n) {
        let (container, stats) = compress(&deployed, digest, &sample.image)?;
        let decoded = decompress(&deployed, digest, &container)?;
        bpp_sum += stats.bpp;
        psnr_sum += psnr(&sample.image.to_tensor(), &decoded.to_tensor(), 1.0)?;
    }

    let task_acc = if cfg.lambda_t > 0.0 {
        let (mut correct, mut total) = (0, 0);
        for chunk in outcome.dataset.chunks(32) {
            let refs: Vec<&SyntheticSample> = chunk.iter().collect();
            let (x, labels) = batch_tensor(&refs)?;
            let (c, t) = batch_accuracy(&deployed, &mut outcome.head, &x, &labels)?;
            correct += c;
            total += t;
        }
        correct as f64 / total as f64
    } else {
        f64::NAN
    };
    Ok((bpp_sum / n as f64, psnr_sum / n as f64, task_acc))
}
