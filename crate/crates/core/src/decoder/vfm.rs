//! `VFM1` model files: magic `VFM1`, a u32 LE tensor count, then per tensor
//! the u32 LE name length, UTF-8 name, u32 LE rank, u32 LE extents and f32 LE
//! values. The decoder configuration lives next to it as JSON.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::{init_params, DecoderConfig, DecoderParams, EncoderParams, Tensor};
use crate::error::{Error, Result};

pub const VFM_MAGIC: &[u8; 4] = b"VFM1";

fn named<'a>(dec: &'a DecoderParams, enc: &'a EncoderParams) -> Vec<(String, &'a Tensor)> {
    let mut v: Vec<(String, &Tensor)> = dec.learnable_names().into_iter().zip(dec.learnable()).collect();
    v.extend(dec.statistics());
    v.extend(enc.learnable_names().into_iter().zip(enc.learnable()));
    v
}

pub fn encode_vfm(dec: &DecoderParams, enc: &EncoderParams) -> Vec<u8> {
    let tensors = named(dec, enc);
    let mut out = Vec::new();
    out.extend_from_slice(VFM_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated model file at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Reads tensors by name into the layout implied by `cfg`.
pub fn decode_vfm(bytes: &[u8], cfg: &DecoderConfig) -> Result<(DecoderParams, EncoderParams)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4).ok() != Some(&VFM_MAGIC[..]) {
        return Err(Error::Format("not a VFM1 model file".into()));
    }
    let count = r.u32()?;
    let mut found: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        if found.insert(name.clone(), Tensor::from_vec(&shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in model file", bytes.len() - r.at)));
    }

    let (mut dec, mut enc) = init_params(cfg, 0)?;
    let mut fill = |name: String, slot: &mut Tensor| -> Result<()> {
        let t = found.remove(&name).ok_or_else(|| Error::Format(format!("model file lacks tensor {name}")))?;
        t.expect_shape(slot.shape(), &name)?;
        *slot = t;
        Ok(())
    };
    let names = dec.learnable_names();
    for (name, slot) in names.into_iter().zip(dec.learnable_mut()) {
        fill(name, slot)?;
    }
    let names: Vec<String> = dec.statistics().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.into_iter().zip(dec.statistics_mut()) {
        fill(name, slot)?;
    }
    let names = enc.learnable_names();
    for (name, slot) in names.into_iter().zip(enc.learnable_mut()) {
        fill(name, slot)?;
    }
    if let Some(extra) = found.keys().min() {
        return Err(Error::Format(format!("unexpected tensor {extra} in model file")));
    }
    dec.validate()?;
    Ok((dec, enc))
}

/// Path of the JSON configuration stored beside a model file.
pub fn config_path(model: &Path) -> PathBuf {
    model.with_extension("json")
}

pub fn save_model(path: impl AsRef<Path>, dec: &DecoderParams, enc: &EncoderParams) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_vfm(dec, enc))?;
    std::fs::write(config_path(path), serde_json::to_string_pretty(&dec.cfg)? + "\n")?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(DecoderParams, EncoderParams)> {
    let path = path.as_ref();
    let cfg: DecoderConfig = serde_json::from_str(&std::fs::read_to_string(config_path(path))?)?;
    cfg.validate()?;
    decode_vfm(&std::fs::read(path)?, &cfg)
}
