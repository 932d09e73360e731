//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Volumes are kept in stored voxel order; only spacing (`pixdim[1..4]`) and
//! the translation part of the qform/sform are interpreted. Images are
//! written as float32, labels as uint8, both with an identity-rotation qform
//! and sform carrying spacing and origin.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Geometry, LabelVolume, Volume3D};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const DT_INT8: i16 = 256;
pub const DT_UINT16: i16 = 512;

/// The subset of header fields this crate reads and writes.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl Header {
    fn for_geometry(g: &Geometry, datatype: i16, bitpix: i16) -> Self {
        let [sx, sy, sz] = g.spacing;
        let [ox, oy, oz] = g.origin;
        Header {
            dim: [3, g.dims[0] as i16, g.dims[1] as i16, g.dims[2] as i16, 1, 1, 1, 1],
            datatype,
            bitpix,
            pixdim: [1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0],
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            qform_code: 1,
            sform_code: 1,
            qoffset: [ox, oy, oz],
            srow: [[sx, 0.0, 0.0, ox], [0.0, sy, 0.0, oy], [0.0, 0.0, sz, oz]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    fn origin(&self) -> [f32; 3] {
        if self.sform_code > 0 {
            [self.srow[0][3], self.srow[1][3], self.srow[2][3]]
        } else {
            self.qoffset
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; VOX_OFFSET];
        put_i32(&mut b, 0, HEADER_SIZE as i32);
        for (k, d) in self.dim.iter().enumerate() {
            put_i16(&mut b, 40 + 2 * k, *d);
        }
        put_i16(&mut b, 70, self.datatype);
        put_i16(&mut b, 72, self.bitpix);
        for (k, p) in self.pixdim.iter().enumerate() {
            put_f32(&mut b, 76 + 4 * k, *p);
        }
        put_f32(&mut b, 108, self.vox_offset);
        put_f32(&mut b, 112, self.scl_slope);
        put_f32(&mut b, 116, self.scl_inter);
        b[123] = 10; // xyzt_units: mm + sec
        put_i16(&mut b, 252, self.qform_code);
        put_i16(&mut b, 254, self.sform_code);
        // identity rotation: quatern b, c, d = 0
        for (k, q) in self.qoffset.iter().enumerate() {
            put_f32(&mut b, 268 + 4 * k, *q);
        }
        for (r, row) in self.srow.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                put_f32(&mut b, 280 + 16 * r + 4 * k, *v);
            }
        }
        b[344..348].copy_from_slice(b"n+1\0");
        b
    }

    fn decode(b: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Nifti {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if b.len() < HEADER_SIZE {
            return Err(bad("truncated header"));
        }
        let sizeof_hdr = get_i32(b, 0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            if i32::from_be_bytes(b[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
                return Err(bad("big-endian files are not supported"));
            }
            return Err(bad("sizeof_hdr is not 348"));
        }
        if &b[344..347] != b"n+1" && &b[344..347] != b"ni1" {
            return Err(bad("missing NIfTI-1 magic"));
        }
        let dim: [i16; 8] = std::array::from_fn(|k| get_i16(b, 40 + 2 * k));
        let pixdim: [f32; 8] = std::array::from_fn(|k| get_f32(b, 76 + 4 * k));
        Ok(Header {
            dim,
            datatype: get_i16(b, 70),
            bitpix: get_i16(b, 72),
            pixdim,
            vox_offset: get_f32(b, 108),
            scl_slope: get_f32(b, 112),
            scl_inter: get_f32(b, 116),
            qform_code: get_i16(b, 252),
            sform_code: get_i16(b, 254),
            qoffset: std::array::from_fn(|k| get_f32(b, 268 + 4 * k)),
            srow: std::array::from_fn(|r| std::array::from_fn(|k| get_f32(b, 280 + 16 * r + 4 * k))),
        })
    }
}

fn put_i16(b: &mut [u8], at: usize, v: i16) {
    b[at..at + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_i32(b: &mut [u8], at: usize, v: i32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_f32(b: &mut [u8], at: usize, v: f32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}
fn get_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes(b[at..at + 2].try_into().unwrap())
}
fn get_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}
fn get_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads header and voxel values (scaled by `scl_slope`/`scl_inter`) as f64.
pub fn read_raw(path: impl AsRef<Path>) -> Result<(Header, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let h = Header::decode(&bytes, path)?;
    let bad = |reason: String| Error::Nifti {
        path: path.to_path_buf(),
        reason,
    };
    let ndim = h.dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(bad(format!("invalid dim[0] = {ndim}")));
    }
    if ndim < 3 || (4..=ndim as usize).any(|k| h.dim[k] > 1) {
        return Err(bad(format!(
            "expected a 3D image, got dim {:?}",
            &h.dim[..=ndim as usize]
        )));
    }
    if h.dim[1..4].iter().any(|&d| d <= 0) {
        return Err(bad(format!("non-positive extent in {:?}", &h.dim[1..4])));
    }
    let n: usize = h.dims().iter().product();
    let width = match h.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(bad(format!("unsupported datatype {other}"))),
    };
    let off = h.vox_offset as usize;
    if off < HEADER_SIZE || bytes.len() < off + n * width {
        return Err(bad(format!(
            "expected {} data bytes at offset {off}, file has {}",
            n * width,
            bytes.len()
        )));
    }
    let body = &bytes[off..off + n * width];
    let mut vals: Vec<f64> = match h.datatype {
        DT_UINT8 => body.iter().map(|&v| v as f64).collect(),
        DT_INT8 => body.iter().map(|&v| v as i8 as f64).collect(),
        DT_INT16 => body
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_UINT16 => body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_INT32 => body
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DT_FLOAT32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if h.scl_slope != 0.0 && (h.scl_slope != 1.0 || h.scl_inter != 0.0) {
        let (s, i) = (h.scl_slope as f64, h.scl_inter as f64);
        vals.iter_mut().for_each(|v| *v = *v * s + i);
    }
    Ok((h, vals))
}

fn geometry_of(h: &Header) -> Geometry {
    let sp = [h.pixdim[1], h.pixdim[2], h.pixdim[3]].map(|s| if s > 0.0 { s } else { 1.0 });
    Geometry {
        dims: h.dims(),
        spacing: sp,
        origin: h.origin(),
    }
}

/// Loads any supported scalar type as a real-valued image.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let (h, vals) = read_raw(path)?;
    Volume3D::new(geometry_of(&h), vals.into_iter().map(|v| v as f32).collect()).map_err(|e| Error::Nifti {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads an integer label map; values must be whole numbers in 0..=255.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let (h, vals) = read_raw(path)?;
    let mut data = Vec::with_capacity(vals.len());
    for (i, v) in vals.into_iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Nifti {
                path: path.to_path_buf(),
                reason: format!("voxel {i} holds non-label value {v}"),
            });
        }
        data.push(v as u8);
    }
    LabelVolume::from_data(geometry_of(&h), data)
}

fn write_bytes(path: &Path, header: &Header, body: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        // mtime stays 0 so output is byte-reproducible
        let mut enc = GzEncoder::new(w, Compression::default());
        enc.write_all(&header.encode())
            .and_then(|_| enc.write_all(body))
            .and_then(|_| enc.finish().map(|_| ()))
    } else {
        w.write_all(&header.encode())
            .and_then(|_| w.write_all(body))
            .and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

fn check_dims(g: &Geometry) -> Result<()> {
    if g.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Shape(format!("dims {:?} exceed NIfTI-1 limits", g.dims)));
    }
    Ok(())
}

/// Writes a float32 image. `.gz` suffix selects gzip compression.
pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    check_dims(v.geometry())?;
    let h = Header::for_geometry(v.geometry(), DT_FLOAT32, 32);
    let body: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_bytes(path.as_ref(), &h, &body)
}

/// Writes a uint8 label map.
pub fn save_labels(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    check_dims(v.geometry())?;
    let h = Header::for_geometry(v.geometry(), DT_UINT8, 8);
    write_bytes(path.as_ref(), &h, v.data())
}
