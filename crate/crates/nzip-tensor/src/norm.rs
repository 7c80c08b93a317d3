//! Batch normalization over N×C×H×W, statistics per channel.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

fn check_bn_shapes(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::Dimension(format!(
            "batch_norm expects [N,C,H,W], got {s:?}"
        )));
    }
    let c = s[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::Dimension(format!(
            "batch_norm scale/shift must be [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((s[0], c, s[2] * s[3]))
}

impl Tensor {
    /// Training-mode batch norm. Returns (y, batch_mean, batch_var) so the
    /// caller can update running statistics; the statistics tensors do not
    /// carry gradients. Variance is the biased (population) estimate.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (n, c, hw) = check_bn_shapes(self, gamma, beta)?;
        let m = (n * hw) as f64;
        if n * hw < 2 {
            return Err(TensorError::Dimension(
                "batch_norm_train needs at least 2 samples per channel".into(),
            ));
        }
        let xd = self.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * hw;
                mean[ch] += xd[base..base + hw].iter().sum::<f64>();
            }
        }
        for v in &mut mean {
            *v /= m;
        }
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * hw;
                var[ch] += xd[base..base + hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= m;
        }

        // xhat retained for the backward pass
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let gd = gamma.data();
        let bd = beta.data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * hw;
                for i in 0..hw {
                    let h = (xd[base + i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = h;
                    out[base + i] = gd[ch] * h + bd[ch];
                }
            }
        }

        let xc = self.clone();
        let gc = gamma.clone();
        let bc = beta.clone();
        let y = Tensor::from_op(
            out,
            self.shape(),
            &[self, gamma, beta],
            Box::new(move |go, sink| {
                // per channel: dx = γ/√(σ²+ε) · (dy − mean(dy) − x̂·mean(dy·x̂))
                let gd = gc.data();
                if sink.entry(&xc).is_some() {
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dyxh = vec![0.0; c];
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * hw;
                            for i in 0..hw {
                                sum_dy[ch] += go[base + i];
                                sum_dyxh[ch] += go[base + i] * xhat[base + i];
                            }
                        }
                    }
                    let dst = sink.entry(&xc).unwrap();
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * hw;
                            let scale = gd[ch] * inv_std[ch];
                            for i in 0..hw {
                                dst[base + i] += scale
                                    * (go[base + i]
                                        - sum_dy[ch] / m
                                        - xhat[base + i] * sum_dyxh[ch] / m);
                            }
                        }
                    }
                }
                if let Some(gg) = sink.entry(&gc) {
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * hw;
                            for i in 0..hw {
                                gg[ch] += go[base + i] * xhat[base + i];
                            }
                        }
                    }
                }
                if let Some(gb) = sink.entry(&bc) {
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * hw;
                            gb[ch] += go[base..base + hw].iter().sum::<f64>();
                        }
                    }
                }
            }),
        );
        Ok((y, mean, var))
    }

    /// Inference-mode batch norm with fixed statistics. Differentiable in x,
    /// gamma, beta; the statistics are constants.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Tensor> {
        let (n, c, hw) = check_bn_shapes(self, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Dimension(format!(
                "running statistics must have length {c}"
            )));
        }
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mean = running_mean.to_vec();
        let mut out = vec![0.0; xd.len()];
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * hw;
                for i in 0..hw {
                    out[base + i] = gd[ch] * (xd[base + i] - mean[ch]) * inv_std[ch] + bd[ch];
                }
            }
        }
        let xc = self.clone();
        let gc = gamma.clone();
        let bc = beta.clone();
        Ok(Tensor::from_op(
            out,
            self.shape(),
            &[self, gamma, beta],
            Box::new(move |go, sink| {
                let gd = gc.data();
                let xd = xc.data();
                if let Some(gx) = sink.entry(&xc) {
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * hw;
                            let scale = gd[ch] * inv_std[ch];
                            for i in 0..hw {
                                gx[base + i] += go[base + i] * scale;
                            }
                        }
                    }
                }
                if let Some(gg) = sink.entry(&gc) {
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * hw;
                            for i in 0..hw {
                                gg[ch] += go[base + i] * (xd[base + i] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                }
                if let Some(gb) = sink.entry(&bc) {
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * hw;
                            gb[ch] += go[base..base + hw].iter().sum::<f64>();
                        }
                    }
                }
            }),
        ))
    }
}
