use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use indexmap::IndexMap;

use super::{infer_config, ModelError, ModelWeights};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"PLCW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// IEEE CRC-32 (reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = !0u32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// Serializes parameters in map order: magic, version, tensor count, then
/// per tensor name, rank, dims, dtype byte, raw little-endian f32 data,
/// and a trailing CRC-32 over everything before it.
pub fn save_weights(w: &ModelWeights, path: &Path) -> Result<(), ModelError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, w.params.len() as u32);
    for (name, tensor) in &w.params {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, tensor.rank() as u32);
        for &d in tensor.shape() {
            push_u64(&mut out, d as u64);
        }
        out.push(DTYPE_F32);
        for &v in tensor.data() {
            let mut buf = [0u8; 4];
            LittleEndian::write_f32(&mut buf, v);
            out.extend_from_slice(&buf);
        }
    }
    let crc = crc32(&out);
    push_u32(&mut out, crc);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelWeights, ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(ModelError::Format(format!(
            "{} too short to be a weight file",
            path.display()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(ModelError::Format(format!(
            "{} has bad magic, expected PLCW",
            path.display()
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = LittleEndian::read_u32(&bytes[bytes.len() - 4..]);
    let computed = crc32(body);
    if stored != computed {
        return Err(ModelError::Checksum { stored, computed });
    }

    let mut cur = Cursor {
        buf: body,
        pos: 4,
        path,
    };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(ModelError::Format(format!(
            "unsupported weight file version {version}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut params = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        if name_len > 4096 {
            return Err(ModelError::Format(format!(
                "parameter name length {name_len} is implausible"
            )));
        }
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Format("parameter name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(ModelError::Format(format!("tensor rank {rank} is implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = cur.u64()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| ModelError::Format("tensor dims overflow".into()))?;
            shape.push(d);
        }
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(ModelError::Format(format!("unsupported dtype {dtype}")));
        }
        let raw = cur.take(numel * 4)?;
        let mut data = vec![0f32; numel];
        LittleEndian::read_f32_into(raw, &mut data);
        let tensor = Tensor::new(shape, data)?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(ModelError::Format(format!("duplicate parameter {name}")));
        }
    }
    if cur.pos != cur.buf.len() {
        return Err(ModelError::Format(format!(
            "{} trailing bytes after last tensor",
            cur.buf.len() - cur.pos
        )));
    }
    let config = infer_config(&params)?;
    let w = ModelWeights { config, params };
    w.verify_shapes()?;
    Ok(w)
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    let mut buf = [0u8; 4];
    LittleEndian::write_u32(&mut buf, v);
    out.extend_from_slice(&buf);
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    let mut buf = [0u8; 8];
    LittleEndian::write_u64(&mut buf, v);
    out.extend_from_slice(&buf);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Format(format!(
                "{} truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }
}
