use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamRegistry;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CUTW";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Serializes a registry. Layout (little-endian throughout):
///
/// ```text
/// magic "CUTW" | u32 version | u32 count
/// count × { u32 name_len | name | u8 dtype | u8 rank | rank × u32 dim | f32 payload }
/// u32 CRC32 of everything before it
/// ```
pub fn encode_weights(reg: &ParamRegistry) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + reg.num_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(reg.len(), "parameter count")?.to_le_bytes());
    for (name, t) in reg.iter() {
        out.extend_from_slice(&u32_len(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("`{name}` has rank {}", t.rank())))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated weight file at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ParamRegistry> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported weight format version {version}")));
    }
    let count = r.u32()?;
    let mut reg = ParamRegistry::new();
    let mut previous: Option<String> = None;
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        if let Some(p) = &previous {
            if p.as_str() >= name.as_str() {
                return Err(Error::Format(format!(
                    "parameter names not sorted and unique: `{p}` before `{name}`"
                )));
            }
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("`{name}` has unknown dtype code {dtype}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("`{name}` shape {shape:?} overflows")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        reg.insert(name.clone(), Tensor::new(shape, data)?)?;
        previous = Some(name);
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} unexpected bytes after the last parameter",
            body.len() - r.pos
        )));
    }
    Ok(reg)
}

pub fn save_weights(reg: &ParamRegistry, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(reg)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamRegistry> {
    let path = path.as_ref();
    decode_weights(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
