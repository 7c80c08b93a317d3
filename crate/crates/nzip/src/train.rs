//! Joint training: interleaved reconstruction and task batches folded into
//! one optimizer step per iteration, with an epoch-level CSV log. Runs are
//! deterministic functions of the config (single seed drives weight init,
//! data generation, shuffling, and quantization noise).

use std::fmt::Write as _;
use std::path::Path;

use nzip_tensor::Tensor;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::codec::{CodecConfig, CodecModel};
use crate::data::{batch_tensor, make_synthetic_dataset, SyntheticSample};
use crate::error::{NzipError, Result};
use crate::losses::{compute_joint_loss, psnr_from_mse, LossWeights};
use crate::optim::Adam;
use crate::task::{parse_activation, StemConfig, StemVariant, TaskHead};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub recon_batch: usize,
    pub task_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda_d: f64,
    pub lambda_t: f64,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub feature_channels: usize,
    pub classes: usize,
    pub dataset_size: usize,
    pub image_size: usize,
    pub stem: StemConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            lr_decay: 1.0,
            recon_batch: 8,
            task_batch: 32,
            epochs: 10,
            seed: 0,
            lambda_d: 1.0,
            lambda_t: 0.0,
            latent_channels: 32,
            hyper_channels: 32,
            feature_channels: 64,
            classes: 4,
            dataset_size: 128,
            image_size: 32,
            stem: StemConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(NzipError::Config("lr must be positive".into()));
        }
        if self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(NzipError::Config("lr_decay must be in (0, 1]".into()));
        }
        if self.recon_batch == 0 || self.task_batch == 0 || self.epochs == 0 {
            return Err(NzipError::Config("batch sizes and epochs must be positive".into()));
        }
        if self.lambda_d < 0.0 || self.lambda_t < 0.0 {
            return Err(NzipError::Config("loss weights must be non-negative".into()));
        }
        if self.image_size % 16 != 0 {
            return Err(NzipError::Config("image_size must be a multiple of 16".into()));
        }
        if self.dataset_size < self.recon_batch.max(self.task_batch) {
            return Err(NzipError::Config("dataset smaller than one batch".into()));
        }
        Ok(())
    }

    /// Parses the flat `key=value` config format. Lines may be blank or start
    /// with `#`; unknown keys are errors so typos never pass silently.
    pub fn from_key_values(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                NzipError::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                NzipError::Config(format!("line {}: bad {what} value {value:?}", lineno + 1))
            };
            match key {
                "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
                "lr_decay" => cfg.lr_decay = value.parse().map_err(|_| bad("lr_decay"))?,
                "recon_batch" => cfg.recon_batch = value.parse().map_err(|_| bad("recon_batch"))?,
                "task_batch" => cfg.task_batch = value.parse().map_err(|_| bad("task_batch"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "lambda_d" => cfg.lambda_d = value.parse().map_err(|_| bad("lambda_d"))?,
                "lambda_t" => cfg.lambda_t = value.parse().map_err(|_| bad("lambda_t"))?,
                "latent_channels" => {
                    cfg.latent_channels = value.parse().map_err(|_| bad("latent_channels"))?
                }
                "hyper_channels" => {
                    cfg.hyper_channels = value.parse().map_err(|_| bad("hyper_channels"))?
                }
                "feature_channels" => {
                    cfg.feature_channels = value.parse().map_err(|_| bad("feature_channels"))?
                }
                "classes" => cfg.classes = value.parse().map_err(|_| bad("classes"))?,
                "dataset_size" => {
                    cfg.dataset_size = value.parse().map_err(|_| bad("dataset_size"))?
                }
                "image_size" => cfg.image_size = value.parse().map_err(|_| bad("image_size"))?,
                "stem" => {
                    cfg.stem.variant = match value {
                        "subpixel" => StemVariant::Subpixel,
                        "truncated" => StemVariant::Truncated,
                        _ => return Err(bad("stem")),
                    }
                }
                "pixel_shuffle_blocks" => {
                    cfg.stem.pixel_shuffle_blocks =
                        value.parse().map_err(|_| bad("pixel_shuffle_blocks"))?
                }
                "use_residual_block" => {
                    cfg.stem.use_residual_block =
                        value.parse().map_err(|_| bad("use_residual_block"))?
                }
                "activation" => cfg.stem.activation = parse_activation(value)?,
                other => {
                    return Err(NzipError::Config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub bpp_estimate: f64,
    pub mse: f64,
    pub psnr: f64,
    pub task_loss: f64,
    pub task_acc: f64,
}

pub const LOG_HEADER: &str = "epoch,bpp_estimate,mse,psnr,task_loss,task_acc";

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for e in log {
        writeln!(
            out,
            "{},{:.6},{:.8},{:.4},{:.6},{:.4}",
            e.epoch, e.bpp_estimate, e.mse, e.psnr, e.task_loss, e.task_acc
        )
        .unwrap();
    }
    out
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    Ok(std::fs::write(path, log_to_csv(log))?)
}

pub struct TrainOutcome {
    pub model: CodecModel,
    pub head: TaskHead,
    pub dataset: Vec<SyntheticSample>,
    pub log: Vec<EpochLog>,
}

/// Trains codec and head jointly from scratch. When λ_t = 0 the task stream
/// is skipped entirely and the head comes back untrained.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = StdRng::seed_from_u64(config.seed);
    let dataset = make_synthetic_dataset(
        config.seed ^ 0x9e37_79b9_7f4a_7c15,
        config.classes,
        config.dataset_size,
        config.image_size,
    )?;
    let codec_cfg = CodecConfig {
        latent_channels: config.latent_channels,
        hyper_channels: config.hyper_channels,
    };
    let mut model = CodecModel::new(codec_cfg, &mut rng)?;
    let mut head = TaskHead::new(
        config.latent_channels,
        config.feature_channels,
        config.classes,
        config.stem,
        &mut rng,
    )?;
    let weights = LossWeights::new(config.lambda_d, config.lambda_t)?;
    let mut opt = Adam::new(config.lr);
    let use_task = config.lambda_t > 0.0;

    let pixels = (config.image_size * config.image_size) as f64;
    let mut log = Vec::with_capacity(config.epochs);
    let mut recon_order: Vec<usize> = (0..dataset.len()).collect();
    let mut task_order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        recon_order.shuffle(&mut rng);
        task_order.shuffle(&mut rng);
        let steps = dataset.len() / config.recon_batch;
        let mut task_cursor = 0usize;

        let (mut bits_sum, mut mse_sum, mut ce_sum) = (0.0, 0.0, 0.0);
        let (mut seen, mut correct) = (0usize, 0usize);
        for step in 0..steps {
            let recon_refs: Vec<&SyntheticSample> = recon_order
                [step * config.recon_batch..(step + 1) * config.recon_batch]
                .iter()
                .map(|&i| &dataset[i])
                .collect();
            let (recon_x, _) = batch_tensor(&recon_refs)?;

            let task_batch = if use_task {
                let refs: Vec<&SyntheticSample> = (0..config.task_batch)
                    .map(|j| &dataset[task_order[(task_cursor + j) % dataset.len()]])
                    .collect();
                task_cursor = (task_cursor + config.task_batch) % dataset.len();
                Some(batch_tensor(&refs)?)
            } else {
                None
            };

            let parts = compute_joint_loss(
                &model,
                use_task.then_some(&mut head),
                &recon_x,
                task_batch.as_ref().map(|(x, l)| (x, l.as_slice())),
                &weights,
                &mut rng,
            )?;
            let total = parts.total.item();
            if !total.is_finite() {
                return Err(NzipError::Divergence(format!(
                    "loss {total} at epoch {epoch}, step {step}"
                )));
            }
            parts.total.backward()?;
            opt.step(|f| {
                model.visit(f);
                if use_task {
                    head.visit(f);
                }
            })?;
            model.project();

            bits_sum += parts.latent_bits + parts.hyper_bits;
            mse_sum += parts.mse;
            if use_task {
                ce_sum += parts.task_ce;
                let (task_x, labels) = task_batch.as_ref().unwrap();
                let (c, n) = batch_accuracy(&model, &mut head, task_x, labels)?;
                correct += c;
                seen += n;
            }
        }

        let denom = steps.max(1) as f64;
        let mse = mse_sum / denom;
        log.push(EpochLog {
            epoch,
            bpp_estimate: bits_sum / denom / pixels,
            mse,
            psnr: psnr_from_mse(mse, 1.0),
            task_loss: if use_task { ce_sum / denom } else { f64::NAN },
            task_acc: if seen > 0 { correct as f64 / seen as f64 } else { f64::NAN },
        });
        opt.lr *= config.lr_decay;
    }

    Ok(TrainOutcome { model, head, dataset, log })
}

/// Eval-mode accuracy of the head on one image batch (encodes and rounds the
/// latent as the downstream protocol would).
pub fn batch_accuracy(
    model: &CodecModel,
    head: &mut TaskHead,
    x: &Tensor,
    labels: &[usize],
) -> Result<(usize, usize)> {
    use crate::entropy::quantize_round;
    let logits = nzip_tensor::no_grad(|| -> Result<Tensor> {
        let z = model.encode_latent(x)?;
        head.classify(&quantize_round(&z)?.to_tensor())
    })?;
    let k = head.classes;
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let pred =
            row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        if pred == label {
            correct += 1;
        }
    }
    Ok((correct, labels.len()))
}
