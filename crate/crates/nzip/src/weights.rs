//! Weight file serialization (.nzwt).
//!
//! Layout, all little-endian:
//!   magic "NZWT" | version u16 | count u32
//!   then per entry: name_len u16, name bytes, rank u8, extent u32 × rank,
//!   values f32 × numel.
//!
//! Files are identified by the first 16 bytes of the SHA-256 of the full file;
//! containers embed that digest so a decoder can refuse mismatched models.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::{CodecConfig, CodecModel};
use crate::error::{NzipError, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NZWT";
pub const WEIGHTS_VERSION: u16 = 1;

/// A named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn digest16(bytes: &[u8]) -> [u8; 16] {
    let full = Sha256::digest(bytes);
    let mut d = [0u8; 16];
    d.copy_from_slice(&full[..16]);
    d
}

pub fn encode_entries(entries: &[WeightEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(u32::try_from(entries.len()).map_err(|_| {
        NzipError::Format("too many weight entries".into())
    })?)
    .to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(NzipError::Format(format!("entry name too long: {}", e.name)));
        }
        if e.shape.len() > u8::MAX as usize {
            return Err(NzipError::Format(format!("entry rank too high: {}", e.name)));
        }
        let numel: usize = e.shape.iter().product();
        if numel != e.data.len() {
            return Err(NzipError::Format(format!(
                "entry {} shape {:?} does not match {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.shape.len() as u8);
        for &ext in &e.shape {
            let ext = u32::try_from(ext)
                .map_err(|_| NzipError::Format(format!("extent too large in {}", e.name)))?;
            out.extend_from_slice(&ext.to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(NzipError::Format("weight file ends mid-record".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<WeightEntry>> {
    let mut c = Cursor { data: bytes, pos: 0 };
    if c.take(4)? != WEIGHTS_MAGIC {
        return Err(NzipError::Format("not a weight file (bad magic)".into()));
    }
    let version = c.u16()?;
    if version != WEIGHTS_VERSION {
        return Err(NzipError::VersionMismatch(version));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| NzipError::Format("entry name is not UTF-8".into()))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let ext = c.u32()? as usize;
            if ext == 0 {
                return Err(NzipError::Format(format!("zero extent in {name}")));
            }
            numel = numel
                .checked_mul(ext)
                .ok_or_else(|| NzipError::Format(format!("shape overflow in {name}")))?;
            shape.push(ext);
        }
        let raw = c.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        entries.push(WeightEntry { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(NzipError::Format("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

pub fn write_weight_file(path: &Path, entries: &[WeightEntry]) -> Result<[u8; 16]> {
    let bytes = encode_entries(entries)?;
    std::fs::write(path, &bytes)?;
    Ok(digest16(&bytes))
}

pub fn read_weight_file(path: &Path) -> Result<(Vec<WeightEntry>, [u8; 16])> {
    let bytes = std::fs::read(path)?;
    Ok((decode_entries(&bytes)?, digest16(&bytes)))
}

/// Snapshots every parameter of the codec by its visit name.
pub fn collect_model_entries(model: &mut CodecModel) -> Vec<WeightEntry> {
    let mut entries = Vec::new();
    model.visit(&mut |name, t| {
        entries.push(WeightEntry { name, shape: t.shape().to_vec(), data: t.data().to_vec() });
    });
    entries
}

pub fn save_model(model: &mut CodecModel, path: &Path) -> Result<[u8; 16]> {
    let entries = collect_model_entries(model);
    write_weight_file(path, &entries)
}

/// Rebuilds a codec from a weight file. The channel widths are read off the
/// stored shapes, so the file is self-describing.
pub fn load_model(path: &Path) -> Result<(CodecModel, [u8; 16])> {
    let (entries, digest) = read_weight_file(path)?;
    let model = model_from_entries(&entries)?;
    Ok((model, digest))
}

pub fn model_from_entries(entries: &[WeightEntry]) -> Result<CodecModel> {
    let find = |name: &str| {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| NzipError::Format(format!("weight file is missing {name}")))
    };
    let latent_channels = find("enc.3.weight")?.shape[0];
    let hyper_channels = find("henc.2.weight")?.shape[0];
    let config = CodecConfig { latent_channels, hyper_channels };

    // seed is irrelevant, every parameter is overwritten below
    let mut rng = <rand::rngs::StdRng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = CodecModel::new(config, &mut rng)?;
    let mut used = vec![false; entries.len()];
    let mut err = None;
    model.visit(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match entries.iter().position(|e| e.name == name) {
            None => err = Some(NzipError::Format(format!("weight file is missing {name}"))),
            Some(i) => {
                let e = &entries[i];
                if e.shape != t.shape() {
                    err = Some(NzipError::Format(format!(
                        "{name}: stored shape {:?} does not match expected {:?}",
                        e.shape,
                        t.shape()
                    )));
                    return;
                }
                used[i] = true;
                *t = nzip_tensor::Tensor::leaf(e.data.clone(), &e.shape).unwrap();
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(i) = used.iter().position(|&u| !u) {
        return Err(NzipError::Format(format!(
            "unexpected entry {} in codec weight file",
            entries[i].name
        )));
    }
    Ok(model)
}
