//! Spatial ops: strided convolution, its transpose, and pixel shuffle.
//!
//! Layout is N×C×H×W row-major throughout. Convolution weights are
//! [out_ch, in_ch, k, k]; transposed-convolution weights are
//! [in_ch, out_ch, k, k], so the gradient of `conv2d` w.r.t. its input is a
//! `conv2d_transposed` with the very same weight tensor (adjoint pairing).

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if input + 2 * padding < k {
        return Err(TensorError::Dimension(format!(
            "spatial extent {input} + 2*{padding} smaller than kernel {k}"
        )));
    }
    Ok((input + 2 * padding - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for o in 0..cout {
            let plane = &mut out[(bn * cout + o) * oh * ow..(bn * cout + o + 1) * oh * ow];
            if let Some(bias) = b {
                plane.fill(bias[o]);
            }
            for c in 0..cin {
                let xin = &x[(bn * cin + c) * h * wd..(bn * cin + c + 1) * h * wd];
                let wk = &w[(o * cin + c) * k * k..(o * cin + c + 1) * k * k];
                for oy in 0..oh {
                    let ybase = (oy * stride) as isize - padding as isize;
                    let i_lo = (-ybase).max(0) as usize;
                    let i_hi = k.min((h as isize - ybase).max(0) as usize);
                    for ox in 0..ow {
                        let xbase = (ox * stride) as isize - padding as isize;
                        let j_lo = (-xbase).max(0) as usize;
                        let j_hi = k.min((wd as isize - xbase).max(0) as usize);
                        let mut acc = 0.0;
                        for i in i_lo..i_hi {
                            let row = (ybase + i as isize) as usize * wd;
                            let wrow = i * k;
                            for j in j_lo..j_hi {
                                acc += xin[row + (xbase + j as isize) as usize] * wk[wrow + j];
                            }
                        }
                        plane[oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Transposed convolution / conv gradient-to-input, gather form.
/// Weights indexed [cin_t, cout_t, k, k] where cin_t is the channel count of
/// `x` here.
#[allow(clippy::too_many_arguments)]
fn tconv2d_raw(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for o in 0..cout {
            let plane = &mut out[(bn * cout + o) * oh * ow..(bn * cout + o + 1) * oh * ow];
            if let Some(bias) = b {
                plane.fill(bias[o]);
            }
            for c in 0..cin {
                let xin = &x[(bn * cin + c) * h * wd..(bn * cin + c + 1) * h * wd];
                let wk = &w[(c * cout + o) * k * k..(c * cout + o + 1) * k * k];
                for oy in 0..oh {
                    for ox in 0..ow {
                        // need oy = ih*stride - padding + i  =>  ih = (oy + padding - i)/stride
                        let mut acc = 0.0;
                        for i in 0..k {
                            let ynum = oy + padding;
                            if ynum < i {
                                break;
                            }
                            let yrem = ynum - i;
                            if yrem % stride != 0 {
                                continue;
                            }
                            let ih = yrem / stride;
                            if ih >= h {
                                continue;
                            }
                            for j in 0..k {
                                let xnum = ox + padding;
                                if xnum < j {
                                    break;
                                }
                                let xrem = xnum - j;
                                if xrem % stride != 0 {
                                    continue;
                                }
                                let iw = xrem / stride;
                                if iw >= wd {
                                    continue;
                                }
                                acc += xin[ih * wd + iw] * wk[i * k + j];
                            }
                        }
                        plane[oy * ow + ox] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Weight gradient of conv2d: gw[o,c,i,j] = Σ_{n,y,x} go[n,o,y,x]·in[n,c,ys−p+i,xs−p+j].
#[allow(clippy::too_many_arguments)]
fn conv2d_grad_weight(
    x: &[f64],
    go: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    gw: &mut [f64],
) {
    for bn in 0..n {
        for o in 0..cout {
            let gplane = &go[(bn * cout + o) * oh * ow..(bn * cout + o + 1) * oh * ow];
            for c in 0..cin {
                let xin = &x[(bn * cin + c) * h * wd..(bn * cin + c + 1) * h * wd];
                let wk = &mut gw[(o * cin + c) * k * k..(o * cin + c + 1) * k * k];
                for oy in 0..oh {
                    let ybase = (oy * stride) as isize - padding as isize;
                    let i_lo = (-ybase).max(0) as usize;
                    let i_hi = k.min((h as isize - ybase).max(0) as usize);
                    for ox in 0..ow {
                        let xbase = (ox * stride) as isize - padding as isize;
                        let j_lo = (-xbase).max(0) as usize;
                        let j_hi = k.min((wd as isize - xbase).max(0) as usize);
                        let g = gplane[oy * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for i in i_lo..i_hi {
                            let row = (ybase + i as isize) as usize * wd;
                            for j in j_lo..j_hi {
                                wk[i * k + j] += g * xin[row + (xbase + j as isize) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D convolution of x[N,C,H,W] with w[O,C,k,k].
    ///
    /// Output spatial extent is floor((H + 2·padding − k)/stride) + 1.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "conv2d expects 4-D input and weight, got {xs:?}, {ws:?}"
            )));
        }
        if ws[2] != ws[3] {
            return Err(TensorError::Dimension("conv2d kernel must be square".into()));
        }
        if xs[1] != ws[1] {
            return Err(TensorError::Dimension(format!(
                "conv2d channel mismatch: input has {}, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if stride == 0 {
            return Err(TensorError::Dimension("stride must be >= 1".into()));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(TensorError::Dimension(format!(
                    "conv2d bias must be [{cout}], got {:?}",
                    b.shape()
                )));
            }
        }
        let oh = conv_out_extent(h, k, stride, padding)?;
        let ow = conv_out_extent(w, k, stride, padding)?;

        let out = conv2d_raw(
            self.data(),
            weight.data(),
            bias.map(|b| b.data()),
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            padding,
            oh,
            ow,
        );

        let xc = self.clone();
        let wc = weight.clone();
        let bc = bias.cloned();
        let mut parents: Vec<&Tensor> = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(Tensor::from_op(
            out,
            &[n, cout, oh, ow],
            &parents,
            Box::new(move |go, sink| {
                if sink.entry(&xc).is_some() {
                    // adjoint: transposed conv of go with the same kernel,
                    // output padding restores the extent lost to flooring
                    let gx = tconv2d_raw(
                        go,
                        wc.data(),
                        None,
                        n,
                        cout,
                        oh,
                        ow,
                        cin,
                        k,
                        stride,
                        padding,
                        h,
                        w,
                    );
                    let dst = sink.entry(&xc).unwrap();
                    for (d, s) in dst.iter_mut().zip(&gx) {
                        *d += s;
                    }
                }
                if let Some(gw) = sink.entry(&wc) {
                    conv2d_grad_weight(
                        xc.data(),
                        go,
                        n,
                        cin,
                        h,
                        w,
                        cout,
                        k,
                        stride,
                        padding,
                        oh,
                        ow,
                        gw,
                    );
                }
                if let Some(b) = &bc {
                    if let Some(gb) = sink.entry(b) {
                        for bn in 0..n {
                            for o in 0..cout {
                                let base = (bn * cout + o) * oh * ow;
                                gb[o] += go[base..base + oh * ow].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Transposed 2-D convolution of x[N,C,H,W] with w[C,O,k,k].
    ///
    /// Output spatial extent is (H−1)·stride − 2·padding + k + output_padding
    /// with 0 ≤ output_padding < stride, given per axis as (rows, cols) so
    /// non-square targets can be hit exactly.
    pub fn conv2d_transposed(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
        output_padding: (usize, usize),
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "conv2d_transposed expects 4-D input and weight, got {xs:?}, {ws:?}"
            )));
        }
        if ws[2] != ws[3] {
            return Err(TensorError::Dimension("kernel must be square".into()));
        }
        if xs[1] != ws[0] {
            return Err(TensorError::Dimension(format!(
                "conv2d_transposed channel mismatch: input has {}, weight expects {}",
                xs[1], ws[0]
            )));
        }
        if stride == 0 || output_padding.0 >= stride || output_padding.1 >= stride {
            return Err(TensorError::Dimension(format!(
                "need stride >= 1 and output_padding < stride, got {stride}, {output_padding:?}"
            )));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(TensorError::Dimension(format!(
                    "bias must be [{cout}], got {:?}",
                    b.shape()
                )));
            }
        }
        let oh_base = (h - 1) * stride + k + output_padding.0;
        let ow_base = (w - 1) * stride + k + output_padding.1;
        if oh_base < 2 * padding + 1 || ow_base < 2 * padding + 1 {
            return Err(TensorError::Dimension(
                "transposed conv output extent would be non-positive".into(),
            ));
        }
        let oh = oh_base - 2 * padding;
        let ow = ow_base - 2 * padding;

        let out = tconv2d_raw(
            self.data(),
            weight.data(),
            bias.map(|b| b.data()),
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            padding,
            oh,
            ow,
        );

        let xc = self.clone();
        let wc = weight.clone();
        let bc = bias.cloned();
        let mut parents: Vec<&Tensor> = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(Tensor::from_op(
            out,
            &[n, cout, oh, ow],
            &parents,
            Box::new(move |go, sink| {
                if sink.entry(&xc).is_some() {
                    // adjoint of scatter is an ordinary strided gather
                    let gx = conv2d_raw(
                        go,
                        wc.data(),
                        None,
                        n,
                        cout,
                        oh,
                        ow,
                        cin,
                        k,
                        stride,
                        padding,
                        h,
                        w,
                    );
                    let dst = sink.entry(&xc).unwrap();
                    for (d, s) in dst.iter_mut().zip(&gx) {
                        *d += s;
                    }
                }
                if let Some(gw) = sink.entry(&wc) {
                    // gw[c,o,i,j] = Σ x[n,c,h,w]·go[n,o,hs−p+i,ws−p+j]
                    let xd = xc.data();
                    for bn in 0..n {
                        for c in 0..cin {
                            let xin = &xd[(bn * cin + c) * h * w..(bn * cin + c + 1) * h * w];
                            for o in 0..cout {
                                let gp =
                                    &go[(bn * cout + o) * oh * ow..(bn * cout + o + 1) * oh * ow];
                                let wk = &mut gw[(c * cout + o) * k * k..(c * cout + o + 1) * k * k];
                                for ih in 0..h {
                                    for iw in 0..w {
                                        let v = xin[ih * w + iw];
                                        if v == 0.0 {
                                            continue;
                                        }
                                        for i in 0..k {
                                            let oy = (ih * stride + i) as isize - padding as isize;
                                            if oy < 0 || oy as usize >= oh {
                                                continue;
                                            }
                                            for j in 0..k {
                                                let ox =
                                                    (iw * stride + j) as isize - padding as isize;
                                                if ox < 0 || ox as usize >= ow {
                                                    continue;
                                                }
                                                wk[i * k + j] +=
                                                    v * gp[oy as usize * ow + ox as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(b) = &bc {
                    if let Some(gb) = sink.entry(b) {
                        for bn in 0..n {
                            for o in 0..cout {
                                let base = (bn * cout + o) * oh * ow;
                                gb[o] += go[base..base + oh * ow].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Channel-to-space rearrangement:
    /// out[n, c, r·h+i, r·w+j] = in[n, c·r² + i·r + j, h, w].
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "pixel_shuffle expects [N,C,H,W], got {s:?}"
            )));
        }
        if r == 0 || s[1] % (r * r) != 0 {
            return Err(TensorError::Dimension(format!(
                "channel count {} not divisible by r²={}",
                s[1],
                r * r
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let co = c / (r * r);
        let (oh, ow) = (h * r, w * r);
        let xd = self.data();
        let mut out = vec![0.0; n * co * oh * ow];
        for bn in 0..n {
            for oc in 0..co {
                for i in 0..r {
                    for j in 0..r {
                        let ic = oc * r * r + i * r + j;
                        let src = (bn * c + ic) * h * w;
                        let dst = (bn * co + oc) * oh * ow;
                        for y in 0..h {
                            for x in 0..w {
                                out[dst + (r * y + i) * ow + (r * x + j)] = xd[src + y * w + x];
                            }
                        }
                    }
                }
            }
        }
        let xc = self.clone();
        Ok(Tensor::from_op(
            out,
            &[n, co, oh, ow],
            &[self],
            Box::new(move |go, sink| {
                if let Some(g) = sink.entry(&xc) {
                    for bn in 0..n {
                        for oc in 0..co {
                            for i in 0..r {
                                for j in 0..r {
                                    let ic = oc * r * r + i * r + j;
                                    let src = (bn * c + ic) * h * w;
                                    let dst = (bn * co + oc) * oh * ow;
                                    for y in 0..h {
                                        for x in 0..w {
                                            g[src + y * w + x] +=
                                                go[dst + (r * y + i) * ow + (r * x + j)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::Dimension(format!(
                "pixel_unshuffle expects [N,C,H,W], got {s:?}"
            )));
        }
        if r == 0 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(TensorError::Dimension(format!(
                "spatial extents {:?} not divisible by r={r}",
                &s[2..]
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let co = c * r * r;
        let (oh, ow) = (h / r, w / r);
        let xd = self.data();
        let mut out = vec![0.0; n * co * oh * ow];
        for bn in 0..n {
            for ic in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let oc = ic * r * r + i * r + j;
                        let src = (bn * c + ic) * h * w;
                        let dst = (bn * co + oc) * oh * ow;
                        for y in 0..oh {
                            for x in 0..ow {
                                out[dst + y * ow + x] = xd[src + (r * y + i) * w + (r * x + j)];
                            }
                        }
                    }
                }
            }
        }
        let xc = self.clone();
        Ok(Tensor::from_op(
            out,
            &[n, co, oh, ow],
            &[self],
            Box::new(move |go, sink| {
                if let Some(g) = sink.entry(&xc) {
                    for bn in 0..n {
                        for ic in 0..c {
                            for i in 0..r {
                                for j in 0..r {
                                    let oc = ic * r * r + i * r + j;
                                    let src = (bn * c + ic) * h * w;
                                    let dst = (bn * co + oc) * oh * ow;
                                    for y in 0..oh {
                                        for x in 0..ow {
                                            g[src + (r * y + i) * w + (r * x + j)] +=
                                                go[dst + y * ow + x];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }
}
