//! The .nzip container: header plus two range-coded payloads (hyper-latent,
//! then latent), and the compress/decompress pipelines around it.
//!
//! Decoding the latent requires the (μ, σ) tables, which come from the
//! hyper-decoder applied to the *decoded* hyper-latent. Compression therefore
//! clamps the rounded hyper-latent into its table windows first and derives
//! the latent tables from those clamped values, so both sides build identical
//! tables and the latent round trip is bit-exact.

use nzip_tensor::{no_grad, Tensor};

use crate::codec::{hyper_dims, latent_dims, CodecModel, DOWNSAMPLE};
use crate::coder::{decode_symbols, encode_symbols};
use crate::entropy::{
    build_cdf_tables, quantize_round, QuantizedLatent, DEFAULT_PRECISION, DEFAULT_TAIL_MASS,
};
use crate::error::{NzipError, Result};
use crate::imageio::Image;

pub const CONTAINER_MAGIC: &[u8; 4] = b"NZIP";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub orig_w: u32,
    pub orig_h: u32,
    pub padded_w: u32,
    pub padded_h: u32,
    /// Latent (channels, height, width).
    pub latent_dims: (u32, u32, u32),
    /// Hyper-latent (channels, height, width).
    pub hyper_dims: (u32, u32, u32),
    /// Truncated SHA-256 of the weight file that produced the payloads.
    pub model_id: [u8; 16],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedImage {
    pub header: Header,
    pub hyper_payload: Vec<u8>,
    pub latent_payload: Vec<u8>,
}

/// Everything `compress` knows about the stream it just produced.
#[derive(Clone, Debug)]
pub struct CompressStats {
    /// Total container bits over original pixel count.
    pub bpp: f64,
    pub latent_payload_bits: usize,
    pub hyper_payload_bits: usize,
    /// Σ −log₂ of the table probabilities actually coded.
    pub latent_table_bits: f64,
    pub hyper_table_bits: f64,
    pub latent_clamped: usize,
    pub hyper_clamped: usize,
}

impl CompressedImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        for v in [h.orig_w, h.orig_h, h.padded_w, h.padded_h] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [h.latent_dims.0, h.latent_dims.1, h.latent_dims.2] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [h.hyper_dims.0, h.hyper_dims.1, h.hyper_dims.2] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.model_id);
        out.extend_from_slice(&(self.hyper_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.hyper_payload);
        out.extend_from_slice(&(self.latent_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.latent_payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CompressedImage> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(NzipError::Format("container ends mid-field".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32f = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        if take(&mut pos, 4)? != CONTAINER_MAGIC {
            return Err(NzipError::Format("not a container (bad magic)".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(NzipError::VersionMismatch(version));
        }
        let orig_w = u32f(&mut pos)?;
        let orig_h = u32f(&mut pos)?;
        let padded_w = u32f(&mut pos)?;
        let padded_h = u32f(&mut pos)?;
        let latent = (u32f(&mut pos)?, u32f(&mut pos)?, u32f(&mut pos)?);
        let hyper = (u32f(&mut pos)?, u32f(&mut pos)?, u32f(&mut pos)?);
        let mut model_id = [0u8; 16];
        model_id.copy_from_slice(take(&mut pos, 16)?);
        let hyper_len = u32f(&mut pos)? as usize;
        let hyper_payload = take(&mut pos, hyper_len)?.to_vec();
        let latent_len = u32f(&mut pos)? as usize;
        let latent_payload = take(&mut pos, latent_len)?.to_vec();
        if pos != bytes.len() {
            return Err(NzipError::Format("trailing bytes after container".into()));
        }
        let header = Header {
            orig_w,
            orig_h,
            padded_w,
            padded_h,
            latent_dims: latent,
            hyper_dims: hyper,
            model_id,
        };
        header.validate()?;
        Ok(CompressedImage { header, hyper_payload, latent_payload })
    }
}

impl Header {
    /// Internal consistency: padding covers the original and is a multiple of
    /// 16, and both dimension triples follow from the padded extents.
    pub fn validate(&self) -> Result<()> {
        let d = DOWNSAMPLE as u32;
        if self.orig_w == 0 || self.orig_h == 0 {
            return Err(NzipError::Format("empty image".into()));
        }
        if self.padded_w % d != 0
            || self.padded_h % d != 0
            || self.padded_w < self.orig_w
            || self.padded_h < self.orig_h
            || self.padded_w - self.orig_w >= d
            || self.padded_h - self.orig_h >= d
        {
            return Err(NzipError::Format("padded extents inconsistent with original".into()));
        }
        let lat = latent_dims((self.padded_h as usize, self.padded_w as usize));
        if (self.latent_dims.1 as usize, self.latent_dims.2 as usize) != lat {
            return Err(NzipError::Format("latent extents inconsistent with padding".into()));
        }
        let hyp = hyper_dims(lat);
        if (self.hyper_dims.1 as usize, self.hyper_dims.2 as usize) != hyp {
            return Err(NzipError::Format("hyper extents inconsistent with latent".into()));
        }
        Ok(())
    }
}

/// Replicates edge pixels until both extents are multiples of 16.
pub fn pad_to_multiple(img: &Image) -> Image {
    let ph = img.height.div_ceil(DOWNSAMPLE) * DOWNSAMPLE;
    let pw = img.width.div_ceil(DOWNSAMPLE) * DOWNSAMPLE;
    if ph == img.height && pw == img.width {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let mut pixels = vec![0.0; 3 * ph * pw];
    for c in 0..3 {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                let sx = x.min(w - 1);
                pixels[(c * ph + y) * pw + x] = img.pixels[(c * h + sy) * w + sx];
            }
        }
    }
    Image { width: pw, height: ph, pixels }
}

fn crop(t: &Tensor, h: usize, w: usize) -> Result<Image> {
    let s = t.shape();
    let (ph, pw) = (s[2], s[3]);
    let data = t.data();
    let mut pixels = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                pixels[(c * h + y) * w + x] = data[(c * ph + y) * pw + x].clamp(0.0, 1.0);
            }
        }
    }
    Image::new(w, h, pixels)
}

/// Runs the full encode pipeline: pad, analyze, quantize, entropy-code.
pub fn compress(
    model: &CodecModel,
    model_id: [u8; 16],
    img: &Image,
) -> Result<(CompressedImage, CompressStats)> {
    no_grad(|| {
        let padded = pad_to_multiple(img);
        let x = padded.to_tensor();
        let z = model.encode_latent(&x)?;
        let (h_z, w_z) = (z.shape()[2], z.shape()[3]);

        let w = model.hyper_encode(&z)?;
        let w_hat = quantize_round(&w)?;
        let prior_params = model.prior.expand(w.shape())?;
        let hyper_tables = build_cdf_tables(&prior_params, DEFAULT_PRECISION, DEFAULT_TAIL_MASS)?;
        // clamp before the hyper-decoder runs: the decoder will only ever see
        // in-window values, so the latent tables must be built from them too
        let (w_coded, hyper_clamped) = hyper_tables.clamp_values(&w_hat.values)?;
        let hyper_payload = encode_symbols(&w_coded, &hyper_tables)?;
        let hyper_table_bits = hyper_tables.table_bits(&w_coded)?;

        let w_quant = QuantizedLatent { values: w_coded, shape: w.shape().to_vec() };
        let params = model.hyper_decode(&w_quant.to_tensor(), (h_z, w_z))?;
        let z_hat = quantize_round(&z)?;
        let latent_tables = build_cdf_tables(&params, DEFAULT_PRECISION, DEFAULT_TAIL_MASS)?;
        let (z_coded, latent_clamped) = latent_tables.clamp_values(&z_hat.values)?;
        let latent_payload = encode_symbols(&z_coded, &latent_tables)?;
        let latent_table_bits = latent_tables.table_bits(&z_coded)?;

        let header = Header {
            orig_w: img.width as u32,
            orig_h: img.height as u32,
            padded_w: padded.width as u32,
            padded_h: padded.height as u32,
            latent_dims: (model.config.latent_channels as u32, h_z as u32, w_z as u32),
            hyper_dims: (
                model.config.hyper_channels as u32,
                w.shape()[2] as u32,
                w.shape()[3] as u32,
            ),
            model_id,
        };
        let compressed = CompressedImage { header, hyper_payload, latent_payload };
        let total_bits = compressed.to_bytes().len() * 8;
        let stats = CompressStats {
            bpp: total_bits as f64 / (img.width * img.height) as f64,
            latent_payload_bits: compressed.latent_payload.len() * 8,
            hyper_payload_bits: compressed.hyper_payload.len() * 8,
            latent_table_bits,
            hyper_table_bits,
            latent_clamped,
            hyper_clamped,
        };
        Ok((compressed, stats))
    })
}

/// Decodes both payloads back to the quantized hyper-latent and latent.
pub fn decode_latents(
    model: &CodecModel,
    c: &CompressedImage,
) -> Result<(QuantizedLatent, QuantizedLatent)> {
    no_grad(|| {
        let h = &c.header;
        h.validate()?;
        if h.latent_dims.0 as usize != model.config.latent_channels
            || h.hyper_dims.0 as usize != model.config.hyper_channels
        {
            return Err(NzipError::Format("channel counts do not match the model".into()));
        }
        let hyper_shape = vec![1, h.hyper_dims.0 as usize, h.hyper_dims.1 as usize, h.hyper_dims.2 as usize];
        let latent_shape =
            vec![1, h.latent_dims.0 as usize, h.latent_dims.1 as usize, h.latent_dims.2 as usize];

        let prior_params = model
            .prior
            .expand(&hyper_shape)?;
        let hyper_tables = build_cdf_tables(&prior_params, DEFAULT_PRECISION, DEFAULT_TAIL_MASS)?;
        let w_values = decode_symbols(&c.hyper_payload, &hyper_tables)?;
        let w_quant = QuantizedLatent { values: w_values, shape: hyper_shape };

        let params = model.hyper_decode(
            &w_quant.to_tensor(),
            (h.latent_dims.1 as usize, h.latent_dims.2 as usize),
        )?;
        let latent_tables = build_cdf_tables(&params, DEFAULT_PRECISION, DEFAULT_TAIL_MASS)?;
        let z_values = decode_symbols(&c.latent_payload, &latent_tables)?;
        let z_quant = QuantizedLatent { values: z_values, shape: latent_shape };
        Ok((w_quant, z_quant))
    })
}

/// Full decode pipeline: entropy-decode, synthesize, crop to original size.
pub fn decompress(
    model: &CodecModel,
    model_id: [u8; 16],
    c: &CompressedImage,
) -> Result<Image> {
    if c.header.model_id != model_id {
        return Err(NzipError::DigestMismatch {
            expected: hex(&c.header.model_id),
            actual: hex(&model_id),
        });
    }
    no_grad(|| {
        let (_, z_quant) = decode_latents(model, c)?;
        let xhat = model.decode_image(&z_quant.to_tensor())?;
        crop(&xhat, c.header.orig_h as usize, c.header.orig_w as usize)
    })
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
