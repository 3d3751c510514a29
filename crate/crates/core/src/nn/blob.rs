//! Binary container for named `f64` arrays.
//!
//! Layout (little endian): the magic `ACNBLOB1`, a `u32` entry count, then
//! per entry a `u32` name length, the UTF-8 name, a `u32` rank, `u64`
//! extents and the values as `f64` bit patterns in row-major order.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::autograd::Array;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ACNBLOB1";

pub fn encode(entries: &[(String, Array)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, a) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
        for &d in a.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode(buf: &[u8]) -> Option<Vec<(String, Array)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return None;
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).ok()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))?;
        let bytes = r.take(n.checked_mul(8)?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, ArrayD::from_shape_vec(IxDyn(&shape), data).ok()?));
    }
    (r.pos == buf.len()).then_some(entries)
}

pub fn write(path: &Path, entries: &[(String, Array)]) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

/// Reads a blob; a missing or malformed file is reported against
/// `component`.
pub fn read(path: &Path, component: &str) -> Result<Vec<(String, Array)>> {
    let buf = fs::read(path).map_err(|e| Error::Checkpoint {
        component: component.to_string(),
        reason: format!("{}: {e}", path.display()),
    })?;
    decode(&buf).ok_or_else(|| Error::Checkpoint {
        component: component.to_string(),
        reason: format!("{}: malformed blob", path.display()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            values in proptest::collection::vec(proptest::num::f64::ANY, 0..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            let data = values[..rows * cols].to_vec();
            let a = ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data).unwrap();
            let entries = vec![("x".to_string(), a.clone()), ("s".to_string(), ArrayD::from_elem(IxDyn(&[]), 1.5))];
            let back = decode(&encode(&entries)).unwrap();
            prop_assert_eq!(back.len(), 2);
            let bits = |a: &Array| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back[0].1), bits(&a));
            prop_assert_eq!(back[0].1.shape(), a.shape());
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let entries = vec![("x".to_string(), ArrayD::from_elem(IxDyn(&[3]), 2.0))];
        let buf = encode(&entries);
        assert!(decode(&buf[..buf.len() - 1]).is_none());
        assert!(decode(b"garbage").is_none());
    }
}
