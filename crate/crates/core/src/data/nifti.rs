//! Minimal single-file NIfTI-1 (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only what volume ingestion needs: dimensions, voxel spacing, the common
//! scalar datatypes and intensity scaling. Orientation matrices are written
//! as a plain scaling and ignored on read.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{ArrayD, IxDyn, ShapeBuilder};

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

/// Storage type used when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoredType {
    U8,
    F32,
}

impl StoredType {
    fn code(self) -> i16 {
        match self {
            StoredType::U8 => 2,
            StoredType::F32 => 16,
        }
    }

    fn bitpix(self) -> i16 {
        match self {
            StoredType::U8 => 8,
            StoredType::F32 => 32,
        }
    }
}

/// A decoded image: values in `(x, y[, z])` order plus voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub data: ArrayD<f64>,
    pub spacing: [f64; 3],
}

fn nifti_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read(path: &Path) -> Result<NiftiImage> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| nifti_err(path, format!("gzip: {e}")))?;
        out
    } else {
        raw
    };
    decode(&bytes).map_err(|reason| nifti_err(path, reason))
}

fn decode(b: &[u8]) -> std::result::Result<NiftiImage, String> {
    if b.len() < HEADER_SIZE {
        return Err(format!("file too short for a header ({} bytes)", b.len()));
    }
    let le = match (
        i32::from_le_bytes(b[0..4].try_into().unwrap()),
        i32::from_be_bytes(b[0..4].try_into().unwrap()),
    ) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err("not a NIfTI-1 header (sizeof_hdr != 348)".into()),
    };
    if &b[344..347] != b"n+1" {
        return Err("only single-file NIfTI-1 (magic n+1) is supported".into());
    }
    let i16_at = |o: usize| {
        let a: [u8; 2] = b[o..o + 2].try_into().unwrap();
        if le { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }
    };
    let f32_at = |o: usize| {
        let a: [u8; 4] = b[o..o + 4].try_into().unwrap();
        if le { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }
    };
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("invalid dim[0] = {ndim}"));
    }
    let mut shape: Vec<usize> = (1..=ndim as usize)
        .map(|i| i16_at(40 + 2 * i).max(0) as usize)
        .collect();
    while shape.len() > 2 && shape.last() == Some(&1) {
        shape.pop();
    }
    if shape.contains(&0) {
        return Err(format!("zero extent in dimensions {shape:?}"));
    }
    let mut spacing = [1.0; 3];
    for (i, s) in spacing.iter_mut().enumerate().take(shape.len().min(3)) {
        let v = f32_at(80 + 4 * i).abs() as f64;
        if v > 0.0 {
            *s = v;
        }
    }
    let datatype = i16_at(70);
    let offset = (f32_at(108) as usize).max(DATA_OFFSET);
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let n: usize = shape.iter().product();
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 | 1024 | 1280 => 8,
        other => return Err(format!("unsupported datatype code {other}")),
    };
    let body = b
        .get(offset..offset + n * width)
        .ok_or_else(|| format!("data truncated: need {} bytes after offset {offset}", n * width))?;
    macro_rules! conv {
        ($t:ty) => {
            body.chunks_exact(width)
                .map(|c| {
                    let a = c.try_into().unwrap();
                    (if le { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
                })
                .collect::<Vec<f64>>()
        };
    }
    let mut values = match datatype {
        2 => body.iter().map(|&v| v as f64).collect(),
        256 => body.iter().map(|&v| v as i8 as f64).collect(),
        4 => conv!(i16),
        512 => conv!(u16),
        8 => conv!(i32),
        768 => conv!(u32),
        16 => conv!(f32),
        64 => conv!(f64),
        1024 => conv!(i64),
        1280 => conv!(u64),
        _ => unreachable!(),
    };
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        values.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    // x varies fastest on disk
    let data = ArrayD::from_shape_vec(IxDyn(&shape).f(), values)
        .map_err(|e| e.to_string())?
        .as_standard_layout()
        .into_owned();
    Ok(NiftiImage { data, spacing })
}

fn encode(data: &ArrayD<f64>, spacing: [f64; 3], stored: StoredType) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut [u8], o: usize, v: i16| h[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], o: usize, v: f32| h[o..o + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, data.ndim() as i16);
    for (i, &d) in data.shape().iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, d as i16);
    }
    for i in data.ndim()..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 70, stored.code());
    put_i16(&mut h, 72, stored.bitpix());
    put_f32(&mut h, 76, 1.0);
    for (i, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, s as f32);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    put_i16(&mut h, 254, 1); // sform: scanner
    put_f32(&mut h, 280, spacing[0] as f32);
    put_f32(&mut h, 300, spacing[1] as f32);
    put_f32(&mut h, 320, spacing[2] as f32);
    h[344..348].copy_from_slice(b"n+1\0");
    let n = data.len();
    h.reserve(n * if stored == StoredType::U8 { 1 } else { 4 });
    for &v in data.t().iter() {
        match stored {
            StoredType::U8 => h.push(v.round().clamp(0.0, 255.0) as u8),
            StoredType::F32 => h.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    h
}

/// Writes a single-file NIfTI-1 image, gzip-compressed when the path ends
/// in `.gz`.
pub fn write(path: &Path, data: &ArrayD<f64>, spacing: [f64; 3], stored: StoredType) -> Result<()> {
    if !(1..=7).contains(&data.ndim()) || data.shape().iter().any(|&d| d > i16::MAX as usize) {
        return Err(nifti_err(path, format!("cannot store shape {:?}", data.shape())));
    }
    let bytes = encode(data, spacing, stored);
    let out = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
