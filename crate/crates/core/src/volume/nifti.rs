//! Single-file NIfTI-1 (`n+1`) reader and writer for 3D scalar images.
//!
//! Supported datatypes: uint8, int16, float32, float64. The file's x axis
//! (`dim[1]`) is our width, `dim[2]` height and `dim[3]` depth, so the voxel
//! order on disk matches the in-memory order.

use std::fs;
use std::path::Path;

use super::{Grid, Mask, Orientation, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// A decoded file: binary images come back as masks.
#[derive(Clone, Debug, PartialEq)]
pub enum Image {
    Volume(Volume),
    Mask(Mask),
}

impl Image {
    pub fn into_volume(self) -> Volume {
        match self {
            Image::Volume(v) => v,
            Image::Mask(m) => m.to_volume(),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[off..off + N].try_into().expect("in bounds");
        if self.big_endian {
            b.reverse();
        }
        b
    }

    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.raw(off))
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.raw(off))
    }

    fn f64(&self, off: usize) -> f64 {
        f64::from_le_bytes(self.raw(off))
    }

    fn f32s<const N: usize>(&self, off: usize) -> [f32; N] {
        std::array::from_fn(|i| self.f32(off + 4 * i))
    }
}

/// Reads a NIfTI-1 file; all-binary contents yield [`Image::Mask`].
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}

/// Reads any supported file as an intensity volume.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti(path).map(Image::into_volume)
}

/// Reads a file that must contain only 0 and 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    match read_nifti(path)? {
        Image::Mask(m) => Ok(m),
        Image::Volume(_) => Err(Error::format(path, "label image has values other than 0 and 1")),
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err("gzip-compressed files are not supported".into());
    }
    if bytes.len() < HEADER_SIZE {
        return Err(format!("file is {} bytes, shorter than a header", bytes.len()));
    }
    let size = <[u8; 4]>::try_from(&bytes[0..4]).expect("4 bytes");
    let big_endian = if i32::from_le_bytes(size) == HEADER_SIZE as i32 {
        false
    } else if i32::from_be_bytes(size) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(format!("sizeof_hdr is {}, expected 348", i32::from_le_bytes(size)));
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(format!("bad magic {:?}", &bytes[344..348]));
    }
    let r = Reader { bytes, big_endian };

    let dim: [i16; 8] = std::array::from_fn(|i| r.i16(40 + 2 * i));
    if dim[0] != 3 {
        return Err(format!("dim[0] is {}, only 3D images are supported", dim[0]));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(format!("non-positive dims {:?}", &dim[1..4]));
    }
    let (w, h, d) = (dim[1] as usize, dim[2] as usize, dim[3] as usize);
    let pixdim: [f32; 8] = r.f32s(76);
    let spacing = [pixdim[3], pixdim[2], pixdim[1]].map(f64::from);
    if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(format!("pixdim {:?} is not a positive spacing", &pixdim[1..4]));
    }

    let datatype = r.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format!("unsupported datatype {other}")),
    };
    let vox_offset = r.f32(108);
    if vox_offset.is_nan() || vox_offset < DATA_OFFSET as f32 {
        return Err(format!("vox_offset {vox_offset} is before the end of the header"));
    }
    let start = vox_offset as usize;
    let n = w * h * d;
    let end = start + n * width;
    if bytes.len() < end {
        return Err(format!("truncated data: need {end} bytes, file has {}", bytes.len()));
    }

    let values: Vec<f64> = (0..n)
        .map(|i| {
            let off = start + i * width;
            match datatype {
                DT_UINT8 => f64::from(bytes[off]),
                DT_INT16 => f64::from(r.i16(off)),
                DT_FLOAT32 => f64::from(r.f32(off)),
                _ => r.f64(off),
            }
        })
        .collect();
    let (slope, inter) = (f64::from(r.f32(112)), f64::from(r.f32(116)));
    let scaled = slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0);
    let values = if scaled {
        values.into_iter().map(|v| v * slope + inter).collect()
    } else {
        values
    };

    let orientation = Orientation {
        qform_code: r.i16(252),
        sform_code: r.i16(254),
        qfac: pixdim[0],
        quatern: r.f32s(256),
        qoffset: r.f32s(268),
        srow_x: r.f32s(280),
        srow_y: r.f32s(296),
        srow_z: r.f32s(312),
    };
    let dims = [d, h, w];
    if values.iter().all(|&v| v == 0.0 || v == 1.0) {
        let data = values.iter().map(|&v| v as u8).collect();
        Ok(Image::Mask(Grid {
            dims,
            spacing,
            orientation,
            data,
        }))
    } else {
        Ok(Image::Volume(Grid {
            dims,
            spacing,
            orientation,
            data: values,
        }))
    }
}

fn header<T>(g: &Grid<T>, datatype: i16, bitpix: i16) -> Result<Vec<u8>> {
    let mut hdr = vec![0u8; DATA_OFFSET];
    let mut put = |off: usize, b: &[u8]| hdr[off..off + b.len()].copy_from_slice(b);
    put(0, &(HEADER_SIZE as i32).to_le_bytes());
    let [d, h, w] = g.dims;
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for (slot, n) in dim[1..4].iter_mut().zip([w, h, d]) {
        *slot = i16::try_from(n).map_err(|_| Error::contract(format!("dimension {n} exceeds the NIfTI-1 limit")))?;
    }
    for (i, v) in dim.iter().enumerate() {
        put(40 + 2 * i, &v.to_le_bytes());
    }
    put(70, &datatype.to_le_bytes());
    put(72, &bitpix.to_le_bytes());
    let o = &g.orientation;
    let mut pixdim = [0f32; 8];
    pixdim[0] = o.qfac;
    pixdim[1] = g.spacing[2] as f32;
    pixdim[2] = g.spacing[1] as f32;
    pixdim[3] = g.spacing[0] as f32;
    for (i, v) in pixdim.iter().enumerate() {
        put(76 + 4 * i, &v.to_le_bytes());
    }
    put(108, &(DATA_OFFSET as f32).to_le_bytes());
    put(112, &1f32.to_le_bytes());
    put(116, &0f32.to_le_bytes());
    // xyzt_units: millimetres
    put(123, &[2]);
    put(252, &o.qform_code.to_le_bytes());
    put(254, &o.sform_code.to_le_bytes());
    let floats = |off: usize, vals: &[f32], put: &mut dyn FnMut(usize, &[u8])| {
        for (i, v) in vals.iter().enumerate() {
            put(off + 4 * i, &v.to_le_bytes());
        }
    };
    floats(256, &o.quatern, &mut put);
    floats(268, &o.qoffset, &mut put);
    floats(280, &o.srow_x, &mut put);
    floats(296, &o.srow_y, &mut put);
    floats(312, &o.srow_z, &mut put);
    put(344, b"n+1\0");
    Ok(hdr)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a float64 little-endian image.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = header(v, DT_FLOAT64, 64)?;
    bytes.reserve(8 * v.data.len());
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Writes a uint8 image.
pub fn write_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = header(m, DT_UINT8, 8)?;
    bytes.extend_from_slice(&m.data);
    write_bytes(path.as_ref(), &bytes)
}
