//! Classifiers that read the quantized latent directly instead of a decoded
//! image. Two stems share one small residual trunk:
//!
//! * subpixel: three 3×3 convs with batch norm, upsampling ×4 through pixel
//!   shuffles (one ×4 block or two ×2 blocks), optionally with an additive
//!   1×1-conv residual path. No transposed convolutions anywhere, which is
//!   the point: pixel shuffle cannot produce checkerboard artifacts.
//! * truncated: a single 1×1 conv that only lifts the channel count, the
//!   cheapest possible adapter and the baseline the subpixel stem is
//!   measured against.

use std::path::Path;

use nzip_tensor::{no_grad, Activation, Tensor};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::codec::CodecModel;
use crate::container::pad_to_multiple;
use crate::data::SyntheticSample;
use crate::entropy::quantize_round;
use crate::error::{NzipError, Result};
use crate::nn::{BatchNorm2d, Conv2d, Linear};
use crate::optim::Adam;
use crate::weights::{
    collect_model_entries, digest16, encode_entries, read_weight_file, write_weight_file,
    WeightEntry,
};

pub const TRUNK_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StemVariant {
    Subpixel,
    Truncated,
}

#[derive(Clone, Copy, Debug)]
pub struct StemConfig {
    pub variant: StemVariant,
    /// 1 = single ×4 shuffle, 2 = two ×2 shuffles. Ignored by `Truncated`.
    pub pixel_shuffle_blocks: usize,
    pub use_residual_block: bool,
    pub activation: Activation,
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig {
            variant: StemVariant::Subpixel,
            pixel_shuffle_blocks: 2,
            use_residual_block: true,
            activation: Activation::Relu,
        }
    }
}

impl StemConfig {
    pub fn truncated() -> StemConfig {
        StemConfig { variant: StemVariant::Truncated, ..StemConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_shuffle_blocks == 1 || self.pixel_shuffle_blocks == 2) {
            return Err(NzipError::Config(format!(
                "pixel_shuffle_blocks must be 1 or 2, got {}",
                self.pixel_shuffle_blocks
            )));
        }
        Ok(())
    }
}

pub fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "mish" => Ok(Activation::Mish),
        "silu" => Ok(Activation::Silu),
        other => Err(NzipError::Config(format!(
            "unknown activation {other:?} (expected relu, mish, or silu)"
        ))),
    }
}

fn activation_code(a: Activation) -> f64 {
    match a {
        Activation::Relu => 0.0,
        Activation::Mish => 1.0,
        Activation::Silu => 2.0,
        Activation::LeakyRelu(_) => 3.0,
    }
}

fn activation_from_code(c: f64) -> Result<Activation> {
    match c as i64 {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Mish),
        2 => Ok(Activation::Silu),
        other => Err(NzipError::Format(format!("unknown activation code {other}"))),
    }
}

struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ResBlock {
    fn new(channels: usize, rng: &mut StdRng) -> ResBlock {
        ResBlock {
            conv1: Conv2d::new(channels, channels, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(channels),
            conv2: Conv2d::new(channels, channels, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(channels),
        }
    }

    fn forward(&mut self, x: &Tensor, act: Activation, train: bool) -> Result<Tensor> {
        let mut h = self.conv1.forward(x)?;
        h = bn(&mut self.bn1, &h, train)?;
        h = act.apply(&h);
        h = self.conv2.forward(&h)?;
        h = bn(&mut self.bn2, &h, train)?;
        Ok(act.apply(&h.add(x)?))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
    }
}

fn bn(layer: &mut BatchNorm2d, x: &Tensor, train: bool) -> Result<Tensor> {
    if train {
        layer.forward_train(x)
    } else {
        layer.forward_eval(x)
    }
}

pub struct TaskHead {
    pub config: StemConfig,
    pub latent_channels: usize,
    pub feature_channels: usize,
    pub classes: usize,
    pub stem_convs: Vec<Conv2d>,
    pub stem_bns: Vec<BatchNorm2d>,
    pub skip: Option<Conv2d>,
    blocks: Vec<ResBlock>,
    fc: Linear,
}

impl TaskHead {
    pub fn new(
        latent_channels: usize,
        feature_channels: usize,
        classes: usize,
        config: StemConfig,
        rng: &mut StdRng,
    ) -> Result<TaskHead> {
        config.validate()?;
        if classes < 2 {
            return Err(NzipError::Config("need at least 2 classes".into()));
        }
        let (cz, cf) = (latent_channels, feature_channels);
        let (stem_convs, stem_bns, skip) = match config.variant {
            StemVariant::Truncated => (vec![Conv2d::new(cz, cf, 1, 1, 0, rng)], vec![], None),
            StemVariant::Subpixel => {
                let convs = if config.pixel_shuffle_blocks == 2 {
                    vec![
                        Conv2d::new(cz, 4 * cf, 3, 1, 1, rng),
                        Conv2d::new(cf, 4 * cf, 3, 1, 1, rng),
                        Conv2d::new(cf, cf, 3, 1, 1, rng),
                    ]
                } else {
                    vec![
                        Conv2d::new(cz, 16 * cf, 3, 1, 1, rng),
                        Conv2d::new(cf, cf, 3, 1, 1, rng),
                        Conv2d::new(cf, cf, 3, 1, 1, rng),
                    ]
                };
                let bns = convs.iter().map(|c| BatchNorm2d::new(c.weight.shape()[0])).collect();
                let skip = config
                    .use_residual_block
                    .then(|| Conv2d::new(cz, 16 * cf, 1, 1, 0, rng));
                (convs, bns, skip)
            }
        };
        let blocks = (0..TRUNK_BLOCKS).map(|_| ResBlock::new(cf, rng)).collect();
        let fc = Linear::new(cf, classes, rng);
        Ok(TaskHead {
            config,
            latent_channels,
            feature_channels,
            classes,
            stem_convs,
            stem_bns,
            skip,
            blocks,
            fc,
        })
    }

    /// Latent [N,C_z,h,w] → features: [N,C_f,4h,4w] for the subpixel stem,
    /// [N,C_f,h,w] for the truncated one.
    pub fn stem(&mut self, z: &Tensor, train: bool) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.latent_channels {
            return Err(NzipError::Dimension(format!(
                "expected [N,{},h,w] latent, got {s:?}",
                self.latent_channels
            )));
        }
        match self.config.variant {
            StemVariant::Truncated => self.stem_convs[0].forward(z),
            StemVariant::Subpixel => {
                let act = self.config.activation;
                let two = self.config.pixel_shuffle_blocks == 2;
                let mut h = self.stem_convs[0].forward(z)?;
                h = act.apply(&bn(&mut self.stem_bns[0], &h, train)?);
                h = h.pixel_shuffle(if two { 2 } else { 4 })?;
                h = self.stem_convs[1].forward(&h)?;
                h = act.apply(&bn(&mut self.stem_bns[1], &h, train)?);
                if two {
                    h = h.pixel_shuffle(2)?;
                }
                h = self.stem_convs[2].forward(&h)?;
                h = bn(&mut self.stem_bns[2], &h, train)?;
                if let Some(skip) = &self.skip {
                    let r = skip.forward(z)?.pixel_shuffle(4)?;
                    h = h.add(&r)?;
                }
                Ok(act.apply(&h))
            }
        }
    }

    /// Full head: stem, residual trunk, pooled linear classifier.
    pub fn forward(&mut self, z: &Tensor, train: bool) -> Result<Tensor> {
        let act = self.config.activation;
        let mut h = self.stem(z, train)?;
        for i in 0..self.blocks.len() {
            h = self.blocks[i].forward(&h, act, train)?;
        }
        let pooled = h.global_avg_pool()?;
        self.fc.forward(&pooled)
    }

    /// Eval-mode logits (batch norm uses running statistics, nothing mutates).
    pub fn classify(&mut self, z: &Tensor) -> Result<Tensor> {
        no_grad(|| self.forward(z, false))
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, c) in self.stem_convs.iter_mut().enumerate() {
            c.visit(&format!("head.stem.{i}"), f);
        }
        for (i, b) in self.stem_bns.iter_mut().enumerate() {
            b.visit(&format!("head.stem_bn.{i}"), f);
        }
        if let Some(skip) = &mut self.skip {
            skip.visit("head.skip", f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("head.block.{i}"), f);
        }
        self.fc.visit("head.fc", f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        for (i, b) in self.stem_bns.iter_mut().enumerate() {
            f(format!("head.stem_bn.{i}.running_mean"), &mut b.running_mean);
            f(format!("head.stem_bn.{i}.running_var"), &mut b.running_var);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("head.block.{i}.bn1.running_mean"), &mut b.bn1.running_mean);
            f(format!("head.block.{i}.bn1.running_var"), &mut b.bn1.running_var);
            f(format!("head.block.{i}.bn2.running_mean"), &mut b.bn2.running_mean);
            f(format!("head.block.{i}.bn2.running_var"), &mut b.bn2.running_var);
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

fn meta_entry(head: &TaskHead) -> WeightEntry {
    let c = &head.config;
    WeightEntry {
        name: "head.meta".into(),
        shape: vec![7],
        data: vec![
            match c.variant {
                StemVariant::Subpixel => 0.0,
                StemVariant::Truncated => 1.0,
            },
            c.pixel_shuffle_blocks as f64,
            c.use_residual_block as u8 as f64,
            activation_code(c.activation),
            head.latent_channels as f64,
            head.feature_channels as f64,
            head.classes as f64,
        ],
    }
}

/// Writes head weights plus a metadata record and the digest of the codec the
/// head was trained against, so eval can refuse a mismatched pairing.
pub fn save_head(head: &mut TaskHead, codec_digest: [u8; 16], path: &Path) -> Result<[u8; 16]> {
    let mut entries = vec![meta_entry(head)];
    entries.push(WeightEntry {
        name: "head.codec_digest".into(),
        shape: vec![16],
        data: codec_digest.iter().map(|&b| b as f64).collect(),
    });
    head.visit(&mut |name, t| {
        entries.push(WeightEntry { name, shape: t.shape().to_vec(), data: t.data().to_vec() });
    });
    head.visit_buffers(&mut |name, buf| {
        entries.push(WeightEntry { name, shape: vec![buf.len()], data: buf.clone() });
    });
    write_weight_file(path, &entries)
}

pub fn load_head(path: &Path) -> Result<(TaskHead, [u8; 16])> {
    let (entries, _) = read_weight_file(path)?;
    let find = |name: &str| {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| NzipError::Format(format!("head file is missing {name}")))
    };
    let meta = find("head.meta")?;
    if meta.data.len() != 7 {
        return Err(NzipError::Format("malformed head metadata".into()));
    }
    let variant = match meta.data[0] as i64 {
        0 => StemVariant::Subpixel,
        1 => StemVariant::Truncated,
        other => return Err(NzipError::Format(format!("unknown stem variant {other}"))),
    };
    let config = StemConfig {
        variant,
        pixel_shuffle_blocks: meta.data[1] as usize,
        use_residual_block: meta.data[2] != 0.0,
        activation: activation_from_code(meta.data[3])?,
    };
    let digest_entry = find("head.codec_digest")?;
    if digest_entry.data.len() != 16 {
        return Err(NzipError::Format("malformed codec digest".into()));
    }
    let mut codec_digest = [0u8; 16];
    for (d, &v) in codec_digest.iter_mut().zip(&digest_entry.data) {
        *d = v as u8;
    }

    let mut rng = StdRng::seed_from_u64(0);
    let mut head = TaskHead::new(
        meta.data[4] as usize,
        meta.data[5] as usize,
        meta.data[6] as usize,
        config,
        &mut rng,
    )?;
    let mut err = None;
    head.visit(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match entries.iter().find(|e| e.name == name) {
            None => err = Some(NzipError::Format(format!("head file is missing {name}"))),
            Some(e) if e.shape != t.shape() => {
                err = Some(NzipError::Format(format!("{name}: shape mismatch")))
            }
            Some(e) => *t = Tensor::leaf(e.data.clone(), &e.shape).unwrap(),
        }
    });
    head.visit_buffers(&mut |name, buf| {
        if err.is_some() {
            return;
        }
        match entries.iter().find(|e| e.name == name) {
            None => err = Some(NzipError::Format(format!("head file is missing {name}"))),
            Some(e) if e.data.len() != buf.len() => {
                err = Some(NzipError::Format(format!("{name}: length mismatch")))
            }
            Some(e) => buf.copy_from_slice(&e.data),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok((head, codec_digest)),
    }
}

#[derive(Clone, Debug)]
pub struct DownstreamConfig {
    pub stem: StemConfig,
    pub feature_channels: usize,
    pub classes: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Fraction of the dataset held out for the reported accuracy.
    pub holdout: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            stem: StemConfig::default(),
            feature_channels: 64,
            classes: 4,
            lr: 1e-3,
            epochs: 10,
            batch: 32,
            seed: 0,
            holdout: 0.25,
        }
    }
}

/// Rounded latents for a sample set, stacked per sample as [1,C_z,h,w].
pub fn precompute_latents(
    model: &CodecModel,
    dataset: &[SyntheticSample],
) -> Result<Vec<(Tensor, usize)>> {
    no_grad(|| {
        dataset
            .iter()
            .map(|s| {
                let x = pad_to_multiple(&s.image).to_tensor();
                let z = model.encode_latent(&x)?;
                Ok((quantize_round(&z)?.to_tensor(), s.label))
            })
            .collect()
    })
}

fn stack_latents(latents: &[&(Tensor, usize)]) -> Result<(Tensor, Vec<usize>)> {
    let shape = latents[0].0.shape().to_vec();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (t, label) in latents {
        if t.shape() != shape {
            return Err(NzipError::Dimension("mixed latent shapes".into()));
        }
        data.extend_from_slice(t.data());
        labels.push(*label);
    }
    let mut batch_shape = shape;
    batch_shape[0] = latents.len();
    Ok((Tensor::constant(data, &batch_shape)?, labels))
}

/// Fraction of latents whose argmax logit matches the label.
pub fn latent_accuracy(head: &mut TaskHead, latents: &[(Tensor, usize)]) -> Result<f64> {
    if latents.is_empty() {
        return Err(NzipError::Dimension("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for chunk in latents.chunks(32) {
        let refs: Vec<&(Tensor, usize)> = chunk.iter().collect();
        let (batch, labels) = stack_latents(&refs)?;
        let logits = head.classify(&batch)?;
        let k = head.classes;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / latents.len() as f64)
}

/// Trains a fresh head on rounded latents from a frozen codec and reports
/// held-out accuracy. The codec is hashed before and after; any drift is a
/// contract violation, not a warning.
pub fn train_downstream(
    model: &mut CodecModel,
    dataset: &[SyntheticSample],
    cfg: &DownstreamConfig,
) -> Result<(TaskHead, f64)> {
    let hash_before = digest16(&encode_entries(&collect_model_entries(model))?);
    let latents = precompute_latents(model, dataset)?;

    let n_hold = ((latents.len() as f64) * cfg.holdout).round() as usize;
    if n_hold == 0 || n_hold >= latents.len() {
        return Err(NzipError::Config("holdout fraction leaves an empty split".into()));
    }
    let (train_set, hold_set) = latents.split_at(latents.len() - n_hold);

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let cz = train_set[0].0.shape()[1];
    let mut head = TaskHead::new(cz, cfg.feature_channels, cfg.classes, cfg.stem, &mut rng)?;
    let mut opt = Adam::new(cfg.lr);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue; // batch norm needs more than one row
            }
            let refs: Vec<&(Tensor, usize)> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (batch, labels) = stack_latents(&refs)?;
            let logits = head.forward(&batch, true)?;
            let loss = logits.softmax_cross_entropy(&labels)?;
            if !loss.item().is_finite() {
                return Err(NzipError::Divergence("task loss became non-finite".into()));
            }
            loss.backward()?;
            opt.step(|f| head.visit(f))?;
        }
    }

    let acc = latent_accuracy(&mut head, hold_set)?;
    let hash_after = digest16(&encode_entries(&collect_model_entries(model))?);
    if hash_before != hash_after {
        return Err(NzipError::Contract(
            "codec parameters changed during frozen-latent training".into(),
        ));
    }
    Ok((head, acc))
}
