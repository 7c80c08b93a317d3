//! Elementwise arithmetic, broadcasting, reductions, dense layers and the
//! classification loss.
//!
//! Binary ops broadcast NumPy-style (right-aligned, size-1 axes stretch).
//! The backward of a broadcast op sums gradient contributions back down to
//! the operand's own shape.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Right-aligned broadcast shape of two operand shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Flat index maps from broadcast output positions into each operand.
fn broadcast_maps(a: &[usize], b: &[usize], out: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let nd = out.len();
    let numel: usize = out.iter().product();
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut p = vec![1; nd - s.len()];
        p.extend_from_slice(s);
        p
    };
    let pa = pad(a);
    let pb = pad(b);
    let strides = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![0; nd];
        let mut acc = 1;
        for i in (0..nd).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let sa = strides(&pa);
    let sb = strides(&pb);
    let mut ma = vec![0usize; numel];
    let mut mb = vec![0usize; numel];
    let mut idx = vec![0usize; nd];
    for flat in 0..numel {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..nd {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        ma[flat] = ia;
        mb[flat] = ib;
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (ma, mb)
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(a: &Tensor, b: &Tensor, kind: BinKind) -> Result<Tensor> {
    let ad = a.data();
    let bd = b.data();
    let apply = |x: f64, y: f64| match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    };

    if a.shape() == b.shape() {
        let data: Vec<f64> = ad.iter().zip(bd).map(|(&x, &y)| apply(x, y)).collect();
        let (ac, bc) = (a.clone(), b.clone());
        let shape = a.shape().to_vec();
        return Ok(Tensor::from_op(
            data,
            &shape,
            &[a, b],
            Box::new(move |go, sink| {
                let (xd, yd) = (ac.data(), bc.data());
                if let Some(ga) = sink.entry(&ac) {
                    for i in 0..go.len() {
                        ga[i] += go[i]
                            * match kind {
                                BinKind::Add | BinKind::Sub => 1.0,
                                BinKind::Mul => yd[i],
                                BinKind::Div => 1.0 / yd[i],
                            };
                    }
                }
                if let Some(gb) = sink.entry(&bc) {
                    for i in 0..go.len() {
                        gb[i] += go[i]
                            * match kind {
                                BinKind::Add => 1.0,
                                BinKind::Sub => -1.0,
                                BinKind::Mul => xd[i],
                                BinKind::Div => -xd[i] / (yd[i] * yd[i]),
                            };
                    }
                }
            }),
        ));
    }

    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let (ma, mb) = broadcast_maps(a.shape(), b.shape(), &out_shape);
    let data: Vec<f64> = ma
        .iter()
        .zip(&mb)
        .map(|(&ia, &ib)| apply(ad[ia], bd[ib]))
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        data,
        &out_shape,
        &[a, b],
        Box::new(move |go, sink| {
            let (xd, yd) = (ac.data(), bc.data());
            if let Some(ga) = sink.entry(&ac) {
                for i in 0..go.len() {
                    ga[ma[i]] += go[i]
                        * match kind {
                            BinKind::Add | BinKind::Sub => 1.0,
                            BinKind::Mul => yd[mb[i]],
                            BinKind::Div => 1.0 / yd[mb[i]],
                        };
                }
            }
            if let Some(gb) = sink.entry(&bc) {
                for i in 0..go.len() {
                    gb[mb[i]] += go[i]
                        * match kind {
                            BinKind::Add => 1.0,
                            BinKind::Sub => -1.0,
                            BinKind::Mul => xd[ma[i]],
                            BinKind::Div => {
                                let y = yd[mb[i]];
                                -xd[ma[i]] / (y * y)
                            }
                        };
                }
            }
        }),
    ))
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, dfdx: impl Fn(f64) -> f64 + 'static) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    let shape = x.shape().to_vec();
    Tensor::from_op(
        data,
        &shape,
        &[x],
        Box::new(move |go, sink| {
            if let Some(g) = sink.entry(&xc) {
                let xd = xc.data();
                for i in 0..go.len() {
                    g[i] += go[i] * dfdx(xd[i]);
                }
            }
        }),
    )
}

fn sigmoid_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_val(x: f64) -> f64 {
    // max(x, 0) + ln(1 + e^{-|x|}), overflow-safe
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Elementwise activation kinds used across the networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Mish,
    Silu,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match *self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu(a) => x.leaky_relu(a),
            Activation::Mish => x.mish(),
            Activation::Silu => x.silu(),
        }
    }
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinKind::Add)
    }
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinKind::Sub)
    }
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinKind::Mul)
    }
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary(self, rhs, BinKind::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, |x| x + c, |_| 1.0)
    }
    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary(self, |x| x * c, move |_| c)
    }
    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |x| x.exp())
    }

    pub fn log(&self) -> Tensor {
        unary(self, f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn powf(&self, p: f64) -> Tensor {
        unary(self, move |x| x.powf(p), move |x| p * x.powf(p - 1.0))
    }

    /// max(x, c) with pass-through gradient on the active side.
    pub fn clamp_min(&self, c: f64) -> Tensor {
        unary(self, move |x| x.max(c), move |x| if x > c { 1.0 } else { 0.0 })
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor {
        unary(
            self,
            move |x| if x >= 0.0 { x } else { alpha * x },
            move |x| if x >= 0.0 { 1.0 } else { alpha },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid_val, |x| {
            let s = sigmoid_val(x);
            s * (1.0 - s)
        })
    }

    /// silu(x) = x * sigmoid(x)
    pub fn silu(&self) -> Tensor {
        unary(
            self,
            |x| x * sigmoid_val(x),
            |x| {
                let s = sigmoid_val(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// mish(x) = x * tanh(softplus(x))
    pub fn mish(&self) -> Tensor {
        unary(
            self,
            |x| x * softplus_val(x).tanh(),
            |x| {
                let t = softplus_val(x).tanh();
                t + x * (1.0 - t * t) * sigmoid_val(x)
            },
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let xc = self.clone();
        Tensor::from_op(
            vec![total],
            &[1],
            &[self],
            Box::new(move |go, sink| {
                if let Some(g) = sink.entry(&xc) {
                    for gi in g.iter_mut() {
                        *gi += go[0];
                    }
                }
            }),
        )
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let total: f64 = self.data().iter().sum();
        let xc = self.clone();
        Tensor::from_op(
            vec![total / n],
            &[1],
            &[self],
            Box::new(move |go, sink| {
                if let Some(g) = sink.entry(&xc) {
                    let scale = go[0] / n;
                    for gi in g.iter_mut() {
                        *gi += scale;
                    }
                }
            }),
        )
    }

    /// Fully connected layer: x[N,I] · w[O,I]ᵀ + b[O].
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::Dimension(format!(
                "linear expects x[N,I] and w[O,I], got {xs:?} and {ws:?}"
            )));
        }
        let (n, i_dim, o_dim) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if b.shape() != [o_dim] {
                return Err(TensorError::Dimension(format!(
                    "linear bias must be [{o_dim}], got {:?}",
                    b.shape()
                )));
            }
        }
        let xd = self.data();
        let wd = weight.data();
        let mut out = vec![0.0; n * o_dim];
        for r in 0..n {
            for o in 0..o_dim {
                let mut acc = match bias {
                    Some(b) => b.data()[o],
                    None => 0.0,
                };
                for i in 0..i_dim {
                    acc += xd[r * i_dim + i] * wd[o * i_dim + i];
                }
                out[r * o_dim + o] = acc;
            }
        }
        let xc = self.clone();
        let wc = weight.clone();
        let bc = bias.cloned();
        let mut parents: Vec<&Tensor> = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(Tensor::from_op(
            out,
            &[n, o_dim],
            &parents,
            Box::new(move |go, sink| {
                let xd = xc.data();
                let wd = wc.data();
                if let Some(gx) = sink.entry(&xc) {
                    for r in 0..n {
                        for i in 0..i_dim {
                            let mut acc = 0.0;
                            for o in 0..o_dim {
                                acc += go[r * o_dim + o] * wd[o * i_dim + i];
                            }
                            gx[r * i_dim + i] += acc;
                        }
                    }
                }
                if let Some(gw) = sink.entry(&wc) {
                    for o in 0..o_dim {
                        for i in 0..i_dim {
                            let mut acc = 0.0;
                            for r in 0..n {
                                acc += go[r * o_dim + o] * xd[r * i_dim + i];
                            }
                            gw[o * i_dim + i] += acc;
                        }
                    }
                }
                if let Some(b) = &bc {
                    if let Some(gb) = sink.entry(b) {
                        for r in 0..n {
                            for o in 0..o_dim {
                                gb[o] += go[r * o_dim + o];
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Mean softmax cross-entropy of logits[N,K] against integer labels.
    /// Returned in nats.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "softmax_cross_entropy expects logits[N,K], got {s:?}"
            )));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "{} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Range(format!("label {bad} out of [0,{k})")));
        }
        let logits = self.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &logits[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                probs[r * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[r * k + j] /= z;
            }
            loss -= (row[labels[r]] - m - z.ln()) / n as f64;
        }
        let xc = self.clone();
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            &[1],
            &[self],
            Box::new(move |go, sink| {
                if let Some(g) = sink.entry(&xc) {
                    let scale = go[0] / n as f64;
                    for r in 0..n {
                        for j in 0..k {
                            let delta = if j == labels[r] { 1.0 } else { 0.0 };
                            g[r * k + j] += scale * (probs[r * k + j] - delta);
                        }
                    }
                }
            }),
        ))
    }

    /// Spatial mean per (batch, channel): [N,C,H,W] → [N,C].
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "global_avg_pool expects [N,C,H,W], got {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let xd = self.data();
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = xd[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let xc = self.clone();
        Ok(Tensor::from_op(
            out,
            &[n, c],
            &[self],
            Box::new(move |go, sink| {
                if let Some(g) = sink.entry(&xc) {
                    for i in 0..n * c {
                        let v = go[i] / hw as f64;
                        for p in 0..hw {
                            g[i * hw + p] += v;
                        }
                    }
                }
            }),
        ))
    }

    /// Channel slice [lo, hi) of an NCHW tensor.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || lo >= hi || hi > s[1] {
            return Err(TensorError::Dimension(format!(
                "slice_channels({lo},{hi}) on shape {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let co = hi - lo;
        let xd = self.data();
        let mut out = vec![0.0; n * co * hw];
        for b in 0..n {
            for ch in 0..co {
                let src = (b * c + lo + ch) * hw;
                let dst = (b * co + ch) * hw;
                out[dst..dst + hw].copy_from_slice(&xd[src..src + hw]);
            }
        }
        let xc = self.clone();
        Ok(Tensor::from_op(
            out,
            &[n, co, h, w],
            &[self],
            Box::new(move |go, sink| {
                if let Some(g) = sink.entry(&xc) {
                    for b in 0..n {
                        for ch in 0..co {
                            let dst = (b * c + lo + ch) * hw;
                            let src = (b * co + ch) * hw;
                            for p in 0..hw {
                                g[dst + p] += go[src + p];
                            }
                        }
                    }
                }
            }),
        ))
    }
}
