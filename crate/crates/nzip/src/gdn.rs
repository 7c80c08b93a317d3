//! Generalized divisive normalization and its inverse.
//!
//! At every spatial location, channel c is divided (GDN) or multiplied (IGDN)
//! by the square root of a learned cross-channel energy:
//!
//!   d_c = β_c + Σ_j γ_cj · x_j²
//!
//! γ acts as a 1×1 cross-channel mixer; β keeps the denominator positive.

use nzip_tensor::Tensor;

use crate::error::{NzipError, Result};

/// β is reprojected to stay at or above this after every optimizer step.
pub const BETA_FLOOR: f64 = 1e-6;

pub struct GdnParams {
    /// Per-channel offset, shape [C], each element > 0.
    pub beta: Tensor,
    /// Cross-channel weights, shape [C, C], each element ≥ 0.
    pub gamma: Tensor,
}

impl GdnParams {
    /// β starts at 1 and γ identity-dominant so the layer begins as a mild
    /// per-channel rescale rather than an aggressive mixer.
    pub fn new(channels: usize) -> GdnParams {
        let beta = Tensor::leaf(vec![1.0; channels], &[channels]).unwrap();
        let mut g = vec![0.0; channels * channels];
        for c in 0..channels {
            g[c * channels + c] = 0.1;
        }
        let gamma = Tensor::leaf(g, &[channels, channels]).unwrap();
        GdnParams { beta, gamma }
    }

    pub fn channels(&self) -> usize {
        self.beta.shape()[0]
    }

    /// Clamps β to [BETA_FLOOR, ∞) and γ to [0, ∞), replacing the parameter
    /// tensors. Called after every optimizer step.
    pub fn project(&mut self) {
        let beta: Vec<f64> = self.beta.data().iter().map(|v| v.max(BETA_FLOOR)).collect();
        self.beta = Tensor::leaf(beta, self.beta.shape()).unwrap();
        let gamma: Vec<f64> = self.gamma.data().iter().map(|v| v.max(0.0)).collect();
        self.gamma = Tensor::leaf(gamma, self.gamma.shape()).unwrap();
    }

    /// Checks the parameter invariants (γ square, β strictly positive).
    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.gamma.shape() != [c, c] {
            return Err(NzipError::Parameter(format!(
                "gamma must be [{c}, {c}], got {:?}",
                self.gamma.shape()
            )));
        }
        if self.beta.data().iter().any(|&b| b <= 0.0) {
            return Err(NzipError::Parameter("beta must be positive everywhere".into()));
        }
        Ok(())
    }

    fn validate_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let c = self.channels();
        let s = x.shape();
        if s.len() != 4 || s[1] != c {
            return Err(NzipError::Dimension(format!(
                "input must be [N,{c},H,W], got {s:?}"
            )));
        }
        Ok((s[0], c, s[2] * s[3]))
    }
}

fn gdn_core(x: &Tensor, p: &GdnParams, inverse: bool) -> Result<Tensor> {
    let (n, c, hw) = p.validate_input(x)?;
    let xd = x.data();
    let bd = p.beta.data();
    let gd = p.gamma.data();

    // denominators saved for the backward pass
    let mut denom = vec![0.0; n * c * hw];
    let mut out = vec![0.0; n * c * hw];
    let mut sq = vec![0.0; c];
    for bn in 0..n {
        let base = bn * c * hw;
        for loc in 0..hw {
            for ch in 0..c {
                let v = xd[base + ch * hw + loc];
                sq[ch] = v * v;
            }
            for ch in 0..c {
                let mut d = bd[ch];
                let row = &gd[ch * c..(ch + 1) * c];
                for j in 0..c {
                    d += row[j] * sq[j];
                }
                let idx = base + ch * hw + loc;
                denom[idx] = d;
                out[idx] = if inverse { xd[idx] * d.sqrt() } else { xd[idx] / d.sqrt() };
            }
        }
    }

    let xc = x.clone();
    let beta = p.beta.clone();
    let gamma = p.gamma.clone();
    Ok(Tensor::from_op(
        out,
        x.shape(),
        &[x, &p.beta, &p.gamma],
        Box::new(move |go, sink| {
            let xd = xc.data();
            let gd = gamma.data();
            let mut gx = vec![0.0; xd.len()];
            let mut gb = vec![0.0; c];
            let mut gg = vec![0.0; c * c];
            let mut t = vec![0.0; c];
            let mut tg = vec![0.0; c];
            let mut sq = vec![0.0; c];
            for bn in 0..n {
                let base = bn * c * hw;
                for loc in 0..hw {
                    for ch in 0..c {
                        let idx = base + ch * hw + loc;
                        let d = denom[idx];
                        sq[ch] = xd[idx] * xd[idx];
                        if inverse {
                            // z = x·d^½:  ∂z_c/∂x_k = δ·d^½ + x_c γ_ck x_k d^-½
                            t[ch] = go[idx] * xd[idx] / d.sqrt();
                            gx[idx] += go[idx] * d.sqrt();
                            gb[ch] += 0.5 * t[ch];
                        } else {
                            // z = x·d^-½:  ∂z_c/∂x_k = δ·d^-½ − x_c γ_ck x_k d^-3/2
                            t[ch] = go[idx] * xd[idx] / (d * d.sqrt());
                            gx[idx] += go[idx] / d.sqrt();
                            gb[ch] -= 0.5 * t[ch];
                        }
                    }
                    // tg_k = Σ_c t_c γ_ck (cross-channel pullback)
                    for k in 0..c {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += t[ch] * gd[ch * c + k];
                        }
                        tg[k] = acc;
                    }
                    let sign = if inverse { 1.0 } else { -1.0 };
                    for k in 0..c {
                        let idx = base + k * hw + loc;
                        gx[idx] += sign * xd[idx] * tg[k];
                    }
                    for ch in 0..c {
                        let half_t = 0.5 * t[ch] * sign;
                        for j in 0..c {
                            gg[ch * c + j] += half_t * sq[j];
                        }
                    }
                }
            }
            if let Some(dst) = sink.entry(&xc) {
                for (d, s) in dst.iter_mut().zip(&gx) {
                    *d += s;
                }
            }
            if let Some(dst) = sink.entry(&beta) {
                for (d, s) in dst.iter_mut().zip(&gb) {
                    *d += s;
                }
            }
            if let Some(dst) = sink.entry(&gamma) {
                for (d, s) in dst.iter_mut().zip(&gg) {
                    *d += s;
                }
            }
        }),
    ))
}

/// z_c = x_c / (β_c + Σ_j γ_cj x_j²)^½ at each spatial location.
pub fn gdn_forward(x: &Tensor, p: &GdnParams) -> Result<Tensor> {
    gdn_core(x, p, false)
}

/// z_c = x_c · (β_c + Σ_j γ_cj x_j²)^½, the multiplicative inverse pairing.
pub fn igdn_forward(x: &Tensor, p: &GdnParams) -> Result<Tensor> {
    gdn_core(x, p, true)
}
