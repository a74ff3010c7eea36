//! Minimal NIfTI-1 reader/writer: single-file `.nii` (optionally gzipped)
//! with the affine header carrying voxel spacing. Supports the datatypes
//! that occur in this pipeline (uint8/int16/int32/float32/float64).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NiftiError>;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// A loaded 3D image: f32 voxels (x fastest) plus spacing in mm.
pub struct NiftiVolume {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> NiftiError + '_ {
    move |source| NiftiError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut raw)
        .map_err(io_err(path))?;
    if is_gz(path) {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn load(path: &Path) -> Result<NiftiVolume> {
    let bytes = read_all(path)?;
    if bytes.len() < VOX_OFFSET {
        return Err(NiftiError::Format(format!(
            "{}: file too small for a NIfTI-1 header",
            path.display()
        )));
    }
    if le_i32(&bytes, 0) != HEADER_SIZE as i32 {
        return Err(NiftiError::Format(format!(
            "{}: not little-endian NIfTI-1 (sizeof_hdr != 348)",
            path.display()
        )));
    }
    if &bytes[344..348] != MAGIC {
        return Err(NiftiError::Format(format!(
            "{}: bad magic (expected single-file n+1)",
            path.display()
        )));
    }
    let ndim = le_i16(&bytes, 40);
    if !(1..=4).contains(&ndim) {
        return Err(NiftiError::Format(format!(
            "{}: unsupported dimensionality {ndim}",
            path.display()
        )));
    }
    let mut dims = [1usize; 4];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = le_i16(&bytes, 42 + 2 * i);
        if v < 1 {
            return Err(NiftiError::Format(format!(
                "{}: non-positive dim {v}",
                path.display()
            )));
        }
        *d = v as usize;
    }
    if dims[3] != 1 {
        return Err(NiftiError::Format(format!(
            "{}: 4D volumes are not supported",
            path.display()
        )));
    }
    let shape = [dims[0], dims[1], dims[2]];
    let mut spacing = [0.0f64; 3];
    for a in 0..3 {
        let v = le_f32(&bytes, 76 + 4 * (a + 1)) as f64;
        spacing[a] = if v > 0.0 { v } else { 1.0 };
    }
    let datatype = le_i16(&bytes, 70);
    let vox_offset = le_f32(&bytes, 108).max(VOX_OFFSET as f32) as usize;
    let scl_slope = le_f32(&bytes, 112);
    let scl_inter = le_f32(&bytes, 116);
    let slope = if scl_slope == 0.0 { 1.0 } else { scl_slope };

    let n = shape[0] * shape[1] * shape[2];
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(NiftiError::Format(format!(
                "{}: unsupported datatype code {other}",
                path.display()
            )));
        }
    };
    if bytes.len() < vox_offset + n * elem {
        return Err(NiftiError::Format(format!(
            "{}: truncated voxel data",
            path.display()
        )));
    }
    let raw = &bytes[vox_offset..vox_offset + n * elem];
    let mut data = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => data.extend(raw.iter().map(|&b| b as f32)),
        DT_INT16 => data.extend(
            raw.chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32),
        ),
        DT_INT32 => data.extend(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        DT_FLOAT32 => data.extend(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        ),
        DT_FLOAT64 => data.extend(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        _ => unreachable!(),
    }
    if slope != 1.0 || scl_inter != 0.0 {
        for v in &mut data {
            *v = *v * slope + scl_inter;
        }
    }
    Ok(NiftiVolume {
        shape,
        spacing,
        data,
    })
}

fn header(shape: [usize; 3], spacing: [f64; 3], datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for a in 0..3 {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&(shape[a] as i16).to_le_bytes());
    }
    for a in 3..7 {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    h[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    for a in 0..3 {
        h[80 + 4 * a..84 + 4 * a].copy_from_slice(&(spacing[a] as f32).to_le_bytes());
    }
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    // xyzt_units: mm (2)
    h[123] = 2;
    // sform: diagonal affine carrying the spacing
    h[254..256].copy_from_slice(&1i16.to_le_bytes());
    for (r, row_off) in [(0usize, 280usize), (1, 296), (2, 312)] {
        let mut row = [0.0f32; 4];
        row[r] = spacing[r] as f32;
        for (i, v) in row.iter().enumerate() {
            h[row_off + 4 * i..row_off + 4 * i + 4].copy_from_slice(&v.to_le_bytes());
        }
    }
    h[344..348].copy_from_slice(MAGIC);
    h
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err(path))?;
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, flate2::Compression::fast());
        enc.write_all(bytes).map_err(io_err(path))?;
        enc.finish().map_err(io_err(path))?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(io_err(path))?;
    }
    Ok(())
}

/// Write a float32 image.
pub fn save_f32(path: &Path, shape: [usize; 3], spacing: [f64; 3], data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), shape[0] * shape[1] * shape[2]);
    let mut bytes = header(shape, spacing, DT_FLOAT32, 32);
    bytes.reserve(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_all(path, &bytes)
}

/// Write a uint8 volume (binary masks, integer class codes).
pub fn save_u8(path: &Path, shape: [usize; 3], spacing: [f64; 3], data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), shape[0] * shape[1] * shape[2]);
    let mut bytes = header(shape, spacing, DT_UINT8, 8);
    bytes.extend_from_slice(data);
    write_all(path, &bytes)
}
