//! RGB image loading and saving (PPM P6 and PNG) plus tensor conversion.
//! Pixels live in [0, 1] as f64, channel-major (CHW).

use std::path::Path;

use nzip_tensor::Tensor;

use crate::error::{NzipError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// CHW, 3 × height × width values in [0, 1].
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Image> {
        if width == 0 || height == 0 {
            return Err(NzipError::Image("image extents must be positive".into()));
        }
        if pixels.len() != 3 * width * height {
            return Err(NzipError::Image(format!(
                "{width}×{height} image needs {} values, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::constant(self.pixels.clone(), &[1, 3, self.height, self.width]).unwrap()
    }

    /// Converts a [1,3,H,W] tensor back into an image, clamping to [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(NzipError::Image(format!("expected [1,3,H,W] tensor, got {s:?}")));
        }
        let pixels = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::new(s[3], s[2], pixels)
    }

    fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                let v = (self.pixels[c * n + i].clamp(0.0, 1.0) * 255.0).round();
                out.push(v as u8);
            }
        }
        out
    }

    fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Image> {
        let n = width * height;
        if rgb.len() != 3 * n {
            return Err(NzipError::Image("pixel data length mismatch".into()));
        }
        let mut pixels = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                pixels[c * n + i] = rgb[3 * i + c] as f64 / 255.0;
            }
        }
        Image::new(width, height, pixels)
    }
}

fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(NzipError::Image("not a P6 PPM".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and # comments between header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(NzipError::Image("PPM header ends early".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(NzipError::Image("malformed PPM header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| NzipError::Image("PPM header field out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(NzipError::Image(format!("only maxval 255 supported, got {maxval}")));
    }
    // exactly one whitespace byte separates header from pixel data
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(NzipError::Image("missing separator before PPM pixels".into()));
    }
    pos += 1;
    let data = &bytes[pos..];
    if data.len() != 3 * width * height {
        return Err(NzipError::Image(format!(
            "PPM pixel section is {} bytes, expected {}",
            data.len(),
            3 * width * height
        )));
    }
    Image::from_rgb8(width, height, data)
}

fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.to_rgb8());
    out
}

pub fn load_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => parse_ppm(&std::fs::read(path)?),
        Some("png") => {
            let img = image::open(path)
                .map_err(|e| NzipError::Image(format!("{}: {e}", path.display())))?
                .to_rgb8();
            Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
        }
        other => Err(NzipError::Image(format!(
            "unsupported image extension {other:?} (use .ppm or .png)"
        ))),
    }
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => Ok(std::fs::write(path, encode_ppm(img))?),
        Some("png") => {
            let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_rgb8())
                .expect("sized buffer");
            buf.save(path).map_err(|e| NzipError::Image(format!("{}: {e}", path.display())))
        }
        other => Err(NzipError::Image(format!(
            "unsupported image extension {other:?} (use .ppm or .png)"
        ))),
    }
}
