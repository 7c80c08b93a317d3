//! The four codec networks: analysis and synthesis transforms for the image
//! latent, and the hyper pair that compresses the latent's own statistics.
//!
//! Analysis: four 5×5 stride-2 convs interlaced with GDN, so a padded image
//! maps to a latent at 1/16 resolution. Synthesis mirrors it with transposed
//! convs and inverse GDN. The hyper-encoder takes |z| through three stride-2
//! convs (ceil semantics, any latent size); the hyper-decoder inverts that
//! trajectory exactly using per-axis output padding and emits per-element
//! (μ, σ) for the conditional Gaussian entropy model.

use nzip_tensor::Tensor;
use rand::rngs::StdRng;

use crate::entropy::{GaussianParams, HyperPrior, SIGMA_MIN};
use crate::error::{NzipError, Result};
use crate::gdn::{gdn_forward, igdn_forward, GdnParams};
use crate::nn::{Conv2d, ConvT2d};

/// Spatial reduction of the analysis transform.
pub const DOWNSAMPLE: usize = 16;
/// Hard cap on trainable parameters; this codec is meant to train on a desk.
pub const MAX_PARAMS: usize = 2_000_000;

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub latent_channels: usize,
    pub hyper_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { latent_channels: 32, hyper_channels: 32 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.hyper_channels == 0 {
            return Err(NzipError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

fn ceil_half(s: usize) -> usize {
    s.div_ceil(2)
}

/// Latent extents for a padded image.
pub fn latent_dims(padded_hw: (usize, usize)) -> (usize, usize) {
    (padded_hw.0 / DOWNSAMPLE, padded_hw.1 / DOWNSAMPLE)
}

/// Extent trajectory of the hyper-encoder: latent, two intermediates, and the
/// hyper-latent. The hyper-decoder walks it in reverse.
pub fn hyper_trajectory(latent_hw: (usize, usize)) -> [(usize, usize); 4] {
    let t0 = latent_hw;
    let t1 = (ceil_half(t0.0), ceil_half(t0.1));
    let t2 = (ceil_half(t1.0), ceil_half(t1.1));
    let t3 = (ceil_half(t2.0), ceil_half(t2.1));
    [t0, t1, t2, t3]
}

/// Hyper-latent extents for a given latent.
pub fn hyper_dims(latent_hw: (usize, usize)) -> (usize, usize) {
    hyper_trajectory(latent_hw)[3]
}

pub struct CodecModel {
    pub config: CodecConfig,
    enc: Vec<Conv2d>,
    enc_gdn: Vec<GdnParams>,
    dec: Vec<ConvT2d>,
    dec_gdn: Vec<GdnParams>,
    henc: Vec<Conv2d>,
    hdec: Vec<ConvT2d>,
    pub prior: HyperPrior,
}

impl CodecModel {
    pub fn new(config: CodecConfig, rng: &mut StdRng) -> Result<CodecModel> {
        config.validate()?;
        let cz = config.latent_channels;
        let cw = config.hyper_channels;
        // hyper-decoder widens toward its 2·C_z output
        let mid = cz + cz.div_ceil(2);

        let enc = vec![
            Conv2d::new(3, cz, 5, 2, 2, rng),
            Conv2d::new(cz, cz, 5, 2, 2, rng),
            Conv2d::new(cz, cz, 5, 2, 2, rng),
            Conv2d::new(cz, cz, 5, 2, 2, rng),
        ];
        let enc_gdn = (0..3).map(|_| GdnParams::new(cz)).collect();
        let dec = vec![
            ConvT2d::new(cz, cz, 5, 2, 2, rng),
            ConvT2d::new(cz, cz, 5, 2, 2, rng),
            ConvT2d::new(cz, cz, 5, 2, 2, rng),
            ConvT2d::new(cz, 3, 5, 2, 2, rng),
        ];
        let dec_gdn = (0..3).map(|_| GdnParams::new(cz)).collect();
        let henc = vec![
            Conv2d::new(cz, cw, 3, 2, 1, rng),
            Conv2d::new(cw, cw, 5, 2, 2, rng),
            Conv2d::new(cw, cw, 5, 2, 2, rng),
        ];
        let hdec = vec![
            ConvT2d::new(cw, cz, 5, 2, 2, rng),
            ConvT2d::new(cz, mid, 5, 2, 2, rng),
            ConvT2d::new(mid, 2 * cz, 5, 2, 2, rng),
        ];
        let prior = HyperPrior::new(cw);

        let mut model =
            CodecModel { config, enc, enc_gdn, dec, dec_gdn, henc, hdec, prior };
        let n = model.param_count();
        if n > MAX_PARAMS {
            return Err(NzipError::Config(format!(
                "{n} parameters exceed the {MAX_PARAMS} budget"
            )));
        }
        Ok(model)
    }

    /// [N,3,H,W] with H, W multiples of 16 → latent [N,C_z,H/16,W/16].
    pub fn encode_latent(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(NzipError::Dimension(format!("expected [N,3,H,W], got {s:?}")));
        }
        if s[2] % DOWNSAMPLE != 0 || s[3] % DOWNSAMPLE != 0 {
            return Err(NzipError::Dimension(format!(
                "spatial extents {}×{} must be multiples of {DOWNSAMPLE}; pad first",
                s[2], s[3]
            )));
        }
        let mut h = self.enc[0].forward(x)?;
        for i in 0..3 {
            h = gdn_forward(&h, &self.enc_gdn[i])?;
            h = self.enc[i + 1].forward(&h)?;
        }
        Ok(h)
    }

    /// Latent [N,C_z,h,w] → image [N,3,16h,16w], unclamped.
    pub fn decode_image(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.config.latent_channels {
            return Err(NzipError::Dimension(format!(
                "expected [N,{},h,w] latent, got {s:?}",
                self.config.latent_channels
            )));
        }
        let mut h = self.dec[0].forward(z, (1, 1))?;
        for i in 0..3 {
            h = igdn_forward(&h, &self.dec_gdn[i])?;
            h = self.dec[i + 1].forward(&h, (1, 1))?;
        }
        Ok(h)
    }

    /// Latent [N,C_z,h,w] → hyper-latent [N,C_w,ceil(h/8),ceil(w/8)].
    pub fn hyper_encode(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.henc[0].forward(&z.abs())?;
        h = self.henc[1].forward(&h.leaky_relu(LEAKY_SLOPE))?;
        self.henc[2].forward(&h.leaky_relu(LEAKY_SLOPE))
    }

    /// Hyper-latent back to per-element (μ, σ) over the latent extents. The
    /// caller passes the latent (h, w) because ceil-halving is lossy.
    pub fn hyper_decode(&self, w: &Tensor, latent_hw: (usize, usize)) -> Result<GaussianParams> {
        let traj = hyper_trajectory(latent_hw);
        let s = w.shape();
        if s.len() != 4 || s[1] != self.config.hyper_channels || (s[2], s[3]) != traj[3] {
            return Err(NzipError::Dimension(format!(
                "expected hyper-latent [N,{},{},{}], got {s:?}",
                self.config.hyper_channels, traj[3].0, traj[3].1
            )));
        }
        // k5 s2 p2 gives base extent 2·in − 1, so output padding is 0 or 1
        // per axis depending on whether the target was even
        let op = |inp: (usize, usize), target: (usize, usize)| {
            (target.0 - (2 * inp.0 - 1), target.1 - (2 * inp.1 - 1))
        };
        let mut h = self.hdec[0].forward(w, op(traj[3], traj[2]))?;
        h = self.hdec[1].forward(&h.leaky_relu(LEAKY_SLOPE), op(traj[2], traj[1]))?;
        h = self.hdec[2].forward(&h.leaky_relu(LEAKY_SLOPE), op(traj[1], traj[0]))?;

        let cz = self.config.latent_channels;
        let mu = h.slice_channels(0, cz)?;
        let sigma = h.slice_channels(cz, 2 * cz)?.exp().clamp_min(SIGMA_MIN);
        GaussianParams::new(mu, sigma)
    }

    /// Hyper round trip in one call: w = hyper_encode(z), then (μ, σ) from
    /// the hyper-decoder applied to `quantize(w)`. The caller picks the
    /// quantizer (noise during training, round-and-clamp at compress time).
    pub fn hyper_forward(
        &self,
        z: &Tensor,
        quantize: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, GaussianParams)> {
        let w = self.hyper_encode(z)?;
        let params = self.hyper_decode(&quantize(&w)?, (z.shape()[2], z.shape()[3]))?;
        Ok((w, params))
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, c) in self.enc.iter_mut().enumerate() {
            c.visit(&format!("enc.{i}"), f);
        }
        for (i, g) in self.enc_gdn.iter_mut().enumerate() {
            f(format!("enc_gdn.{i}.beta"), &mut g.beta);
            f(format!("enc_gdn.{i}.gamma"), &mut g.gamma);
        }
        for (i, c) in self.dec.iter_mut().enumerate() {
            c.visit(&format!("dec.{i}"), f);
        }
        for (i, g) in self.dec_gdn.iter_mut().enumerate() {
            f(format!("dec_gdn.{i}.beta"), &mut g.beta);
            f(format!("dec_gdn.{i}.gamma"), &mut g.gamma);
        }
        for (i, c) in self.henc.iter_mut().enumerate() {
            c.visit(&format!("henc.{i}"), f);
        }
        for (i, c) in self.hdec.iter_mut().enumerate() {
            c.visit(&format!("hdec.{i}"), f);
        }
        f("prior.mu".into(), &mut self.prior.mu);
        f("prior.log_sigma".into(), &mut self.prior.log_sigma);
    }

    /// Re-applies the GDN domain constraints; call after every optimizer step.
    pub fn project(&mut self) {
        for g in self.enc_gdn.iter_mut().chain(self.dec_gdn.iter_mut()) {
            g.project();
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}
