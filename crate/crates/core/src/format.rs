//! Binary containers: `MAAF` feature stacks and `MAAC` checkpoints.
//!
//! Both start with a 4-byte magic, a little-endian `u16` version and a
//! `u16` count field, and end with a CRC32 (IEEE) of the bytes between that
//! 8-byte preamble and the checksum itself.
//!
//! MAAF: `MAAF | u16 version=1 | u16 num_stages | { u32 C, u32 H, u32 W, f32[C·H·W] }* | u32 crc`
//!
//! MAAC: `MAAC | u16 version=1 | u16 0 | u32 count | { u16 name_len, name, u16 rank, u32 dims[rank], f32[..] }* | u32 crc`

use std::path::Path;

use maae_tensor::Tensor;

use crate::error::{FormatError, MaaeError, Result};
use crate::params::ParamStore;

pub const FEATURE_MAGIC: [u8; 4] = *b"MAAF";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MAAC";
pub const VERSION: u16 = 1;
const PREAMBLE: usize = 8;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::TruncatedFile {
                offset: self.pos,
                needed: n,
                available: self.bytes.len() - self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, FormatError> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| FormatError::Malformed("element count overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Validates magic and version, returning a reader positioned after the
/// preamble and the preamble's count field.
fn open<'a>(bytes: &'a [u8], magic: [u8; 4]) -> std::result::Result<(Reader<'a>, u16), FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let found = r.take(4).map_err(|_| FormatError::BadMagic {
        expected: magic,
        found: bytes.to_vec(),
    })?;
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: magic,
            found: found.to_vec(),
        });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let count = r.u16()?;
    Ok((r, count))
}

fn finish(mut r: Reader<'_>) -> std::result::Result<(), FormatError> {
    let payload_end = r.pos;
    let stored = r.u32()?;
    if r.pos != r.bytes.len() {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes after checksum",
            r.bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&r.bytes[PREAMBLE..payload_end]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    Ok(())
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out[PREAMBLE..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| FormatError::Malformed(format!("dimension {d} exceeds u32")).into())
}

/// Serializes `C×H×W` stages into the MAAF layout.
pub fn encode_features(stages: &[Tensor<f32>]) -> Result<Vec<u8>> {
    let count = u16::try_from(stages.len()).map_err(|_| FormatError::Malformed("too many stages".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for s in stages {
        let (c, h, w) = s.dims3("maaf stage")?;
        for d in [c, h, w] {
            out.extend_from_slice(&dim_u32(d)?.to_le_bytes());
        }
        put_f32s(&mut out, s.data());
    }
    Ok(seal(out))
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<Tensor<f32>>> {
    let (mut r, count) = open(bytes, FEATURE_MAGIC)?;
    let mut stages = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| FormatError::Malformed("stage size overflow".into()))?;
        let data = r.f32s(n)?;
        stages.push(Tensor::new(&[c, h, w], data).map_err(|e| FormatError::Malformed(e.to_string()))?);
    }
    finish(r)?;
    Ok(stages)
}

/// Serializes a named parameter table into the MAAC layout.
pub fn encode_checkpoint(params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&dim_u32(params.len())?.to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| FormatError::Malformed("name too long".into()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u16::try_from(t.rank()).map_err(|_| FormatError::Malformed("rank too large".into()))?;
        out.extend_from_slice(&rank.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&dim_u32(d)?.to_le_bytes());
        }
        put_f32s(&mut out, t.data());
    }
    Ok(seal(out))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let (mut r, _) = open(bytes, CHECKPOINT_MAGIC)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        if store.id_of(&name).is_some() {
            return Err(FormatError::Malformed(format!("duplicate parameter {name}")).into());
        }
        let rank = r.u16()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed("parameter size overflow".into()))?;
        let data = r.f32s(n)?;
        let t = Tensor::new(&shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
        store.add(name, t);
    }
    finish(r)?;
    Ok(store)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| MaaeError::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a half-written file behind
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| MaaeError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| MaaeError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| MaaeError::io(path, e))
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>) -> Result<()> {
    write_bytes(path, &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    decode_checkpoint(&read_bytes(path)?)
}
