//! Binary weight blobs.
//!
//! Layout (little endian): magic `SONOWTS1`, `u32` section count (1 or 2),
//! then per section a `u32` tensor count and per tensor a `u64` length
//! followed by that many `f64`s. The first section holds model weights, the
//! optional second any auxiliary state (optimiser moments).

use std::fs;
use std::path::Path;

use super::ModelError;

const MAGIC: &[u8; 8] = b"SONOWTS1";

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub tensors: Vec<Vec<f64>>,
    pub extra: Option<Vec<Vec<f64>>>,
}

fn put_section(out: &mut Vec<u8>, tensors: &[&[f64]]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(tensors: &[&[f64]], extra: Option<&[&[f64]]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * tensors.iter().map(|t| t.len() + 1).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(1 + u32::from(extra.is_some())).to_le_bytes());
    put_section(&mut out, tensors);
    if let Some(e) = extra {
        put_section(&mut out, e);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::CorruptBlob("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn section(&mut self) -> Result<Vec<Vec<f64>>, ModelError> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = usize::try_from(self.u64()?).map_err(|_| ModelError::CorruptBlob("length overflow".into()))?;
            let bytes_len = len
                .checked_mul(8)
                .ok_or_else(|| ModelError::CorruptBlob("length overflow".into()))?;
            let raw = self.take(bytes_len)?;
            out.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            );
        }
        Ok(out)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Blob, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ModelError::CorruptBlob("bad magic".into()));
    }
    let sections = r.u32()?;
    if !(1..=2).contains(&sections) {
        return Err(ModelError::CorruptBlob(format!("{sections} sections")));
    }
    let tensors = r.section()?;
    let extra = if sections == 2 { Some(r.section()?) } else { None };
    if r.pos != bytes.len() {
        return Err(ModelError::CorruptBlob("trailing bytes".into()));
    }
    Ok(Blob { tensors, extra })
}

pub fn write_file(path: &Path, tensors: &[&[f64]], extra: Option<&[&[f64]]>) -> Result<(), ModelError> {
    fs::write(path, encode(tensors, extra)).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_file(path: &Path) -> Result<Blob, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode(&bytes)
}

/// Copies `tensors` into `params`, which must match in count and lengths.
pub fn assign(params: Vec<&mut Vec<f64>>, tensors: Vec<Vec<f64>>) -> Result<(), ModelError> {
    if params.len() != tensors.len() {
        return Err(ModelError::MetadataMismatch(format!(
            "expected {} tensors, blob has {}",
            params.len(),
            tensors.len()
        )));
    }
    for (i, (p, t)) in params.iter().zip(&tensors).enumerate() {
        if p.len() != t.len() {
            return Err(ModelError::MetadataMismatch(format!(
                "tensor {i}: expected {} values, blob has {}",
                p.len(),
                t.len()
            )));
        }
    }
    for (p, t) in params.into_iter().zip(tensors) {
        *p = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let a = vec![1.0, -2.5, f64::MIN_POSITIVE];
        let b: Vec<f64> = vec![];
        let bytes = encode(&[&a, &b], Some(&[&[3.0]]));
        let blob = decode(&bytes).unwrap();
        assert_eq!(blob.tensors, vec![a, b]);
        assert_eq!(blob.extra, Some(vec![vec![3.0]]));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOTABLOB\x01\x00\x00\x00").is_err());
    }
}
