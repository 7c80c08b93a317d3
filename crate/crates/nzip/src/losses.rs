//! Rate-distortion objectives. Everything is measured in bits, so the rate
//! terms read directly as expected file size: a per-image rate of R bits on
//! an H×W image is R/(H·W) bpp.
//!
//! The naive objective is rate(z̃ | hyper) + rate(w̃ | prior) + λ_d·MSE with
//! uniform-noise quantization on both latents. The task-informed objective
//! adds λ_t times a classification loss whose head reads the noisy latent
//! directly; with λ_t = 0 it reduces to the naive objective exactly.

use nzip_tensor::Tensor;
use rand::rngs::StdRng;

use crate::codec::CodecModel;
use crate::entropy::{hyper_rate_bits, quantize_noise, rate_bits};
use crate::error::{NzipError, Result};
use crate::task::TaskHead;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_d: f64,
    /// Weight of the classification task term.
    pub lambda_t: f64,
}

impl LossWeights {
    pub fn new(lambda_d: f64, lambda_t: f64) -> Result<LossWeights> {
        if lambda_d < 0.0 || lambda_t < 0.0 {
            return Err(NzipError::Config("loss weights must be non-negative".into()));
        }
        Ok(LossWeights { lambda_d, lambda_t })
    }
}

/// The assembled objective plus its terms as plain numbers, so callers can
/// log them or assert the decomposition without re-running the forward pass.
pub struct LossParts {
    /// Differentiable scalar: latent_bits + hyper_bits + λ_d·mse + λ_t·task_ce.
    pub total: Tensor,
    /// Per-image latent rate in bits (batch mean).
    pub latent_bits: f64,
    /// Per-image hyper-latent rate in bits (batch mean).
    pub hyper_bits: f64,
    pub mse: f64,
    /// Mean cross-entropy of the task batch; NaN when no task term was built.
    pub task_ce: f64,
}

/// Mean squared error over all elements, differentiable.
pub fn distortion_mse(x: &Tensor, xhat: &Tensor) -> Result<Tensor> {
    if x.shape() != xhat.shape() {
        return Err(NzipError::Dimension(format!(
            "mse over {:?} vs {:?}",
            x.shape(),
            xhat.shape()
        )));
    }
    let d = x.sub(xhat)?;
    Ok(d.mul(&d)?.mean())
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// 10·log₁₀(peak²/MSE); +∞ for identical inputs.
pub fn psnr(x: &Tensor, xhat: &Tensor, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(distortion_mse(x, xhat)?.item(), peak))
}

/// One joint forward pass: compression terms on `recon_x`, optional task term
/// on its own batch. Noise is drawn in a fixed order (latent of `recon_x`,
/// its hyper-latent, then the task latent), so runs are reproducible from the
/// rng state alone.
pub fn compute_joint_loss(
    model: &CodecModel,
    head: Option<&mut TaskHead>,
    recon_x: &Tensor,
    task: Option<(&Tensor, &[usize])>,
    weights: &LossWeights,
    rng: &mut StdRng,
) -> Result<LossParts> {
    let n = recon_x.shape()[0] as f64;
    let z = model.encode_latent(recon_x)?;
    let z_noisy = quantize_noise(&z, rng);
    let w = model.hyper_encode(&z)?;
    let w_noisy = quantize_noise(&w, rng);
    let params = model.hyper_decode(&w_noisy, (z.shape()[2], z.shape()[3]))?;

    let rate_z = rate_bits(&z_noisy, &params)?.mul_scalar(1.0 / n);
    let rate_w = hyper_rate_bits(&w_noisy, &model.prior)?.mul_scalar(1.0 / n);
    let xhat = model.decode_image(&z_noisy)?;
    let mse = distortion_mse(recon_x, &xhat)?;

    let mut total = rate_z.add(&rate_w)?.add(&mse.mul_scalar(weights.lambda_d))?;
    let mut task_ce = f64::NAN;
    if let (Some(head), Some((task_x, labels))) = (head, task) {
        let zt = model.encode_latent(task_x)?;
        let zt_noisy = quantize_noise(&zt, rng);
        let logits = head.forward(&zt_noisy, true)?;
        let ce = logits.softmax_cross_entropy(labels)?;
        task_ce = ce.item();
        total = total.add(&ce.mul_scalar(weights.lambda_t))?;
    }

    Ok(LossParts {
        latent_bits: rate_z.item(),
        hyper_bits: rate_w.item(),
        mse: mse.item(),
        task_ce,
        total,
    })
}

/// Rate + λ_d·distortion on one batch (the plain compression objective).
pub fn loss_naive(
    x: &Tensor,
    model: &CodecModel,
    weights: &LossWeights,
    rng: &mut StdRng,
) -> Result<LossParts> {
    compute_joint_loss(model, None, x, None, weights, rng)
}

/// The task-informed objective on one batch: the naive terms plus
/// λ_t·cross-entropy of the head applied to the same noisy latent's image
/// batch. With λ_t = 0 the total is bit-identical to `loss_naive` because the
/// compression terms consume the same noise draws first.
pub fn loss_task_informed(
    x: &Tensor,
    labels: &[usize],
    model: &CodecModel,
    head: &mut TaskHead,
    weights: &LossWeights,
    rng: &mut StdRng,
) -> Result<LossParts> {
    compute_joint_loss(model, Some(head), x, Some((x, labels)), weights, rng)
}
