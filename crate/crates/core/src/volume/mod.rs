//! Scalar volumes and binary masks on a voxel grid, intensity
//! normalization, and padding to a size multiple.
//!
//! Axes are `(depth, height, width)` with width fastest; spacing is given in
//! the same order as `(sz, sy, sx)` millimetres.

mod nifti;

pub use nifti::{read_mask, read_nifti, read_volume, write_mask, write_volume, Image};

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Orientation fields of a NIfTI header, carried through unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub qfac: f32,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qform_code: 0,
            sform_code: 0,
            qfac: 1.0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow_x: [0.0; 4],
            srow_y: [0.0; 4],
            srow_z: [0.0; 4],
        }
    }
}

/// A 3D voxel grid with physical spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub orientation: Orientation,
    pub(crate) data: Vec<T>,
}

/// Scalar intensity image.
pub type Volume = Grid<f64>;

/// Binary label image; every value is 0 or 1.
pub type Mask = Grid<u8>;

fn check_geometry(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::contract(format!("dims must be positive, got {dims:?}")));
    }
    if dims.iter().product::<usize>() != len {
        return Err(Error::contract(format!("dims {dims:?} do not match {len} voxels")));
    }
    if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::contract(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

impl<T> Grid<T> {
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat index of voxel `(z, y, x)`.
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Inverse of [`Grid::index`].
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [_, h, w] = self.dims;
        [i / (h * w), (i / w) % h, i % w]
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn same_grid<U>(&self, other: &Grid<U>) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        Ok(Grid {
            dims,
            spacing,
            orientation: Orientation::default(),
            data,
        })
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Mask {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::contract(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(Grid {
            dims,
            spacing,
            orientation: Orientation::default(),
            data,
        })
    }

    pub fn empty(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0; dims.iter().product()])
    }

    /// Builds a mask from a predicate over voxel coordinates.
    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(u8::from(f(z, y, x)));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)] == 1
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, on: bool) {
        let i = self.index(z, y, x);
        self.data[i] = u8::from(on);
    }

    pub fn to_volume(&self) -> Volume {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            orientation: self.orientation.clone(),
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Zero-mean, unit-variance intensities over all voxels. A constant volume
/// maps to zeros.
pub fn normalize(v: &Volume) -> Volume {
    let n = v.data.len() as f64;
    let first = v.data[0];
    let mean = v.data.iter().sum::<f64>() / n;
    let var = v.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let data = if std == 0.0 || v.data.iter().all(|&x| x == first) {
        vec![0.0; v.data.len()]
    } else {
        v.data.iter().map(|x| (x - mean) / std).collect()
    };
    Grid { data, ..v.clone() }
}

/// Zero-padding applied by [`pad_to_multiple`], enough to undo it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub original: [usize; 3],
    pub low: [usize; 3],
    pub high: [usize; 3],
}

impl PadRecord {
    pub fn padded_dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.original[a] + self.low[a] + self.high[a])
    }

    pub fn is_identity(&self) -> bool {
        self.low == [0; 3] && self.high == [0; 3]
    }

    /// `key=value` lines for a sidecar file.
    pub fn to_kv(&self) -> String {
        let j = |a: [usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        format!(
            "original_dims={}\npad_low={}\npad_high={}\n",
            j(self.original),
            j(self.low),
            j(self.high)
        )
    }

    /// Parses the keys written by [`PadRecord::to_kv`]; other keys are ignored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let triple = |key: &str| -> Result<[usize; 3]> {
            let raw = map
                .get(key)
                .ok_or_else(|| Error::Config(format!("sidecar is missing '{key}'")))?;
            let parts: Vec<usize> = raw
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad value for '{key}': {raw}")))?;
            parts
                .try_into()
                .map_err(|_| Error::Config(format!("'{key}' needs three values: {raw}")))
        };
        Ok(PadRecord {
            original: triple("original_dims")?,
            low: triple("pad_low")?,
            high: triple("pad_high")?,
        })
    }
}

/// Zero-pads every axis up to the next multiple of `m`, splitting the
/// padding evenly with any odd voxel on the high side.
pub fn pad_to_multiple<T: Copy + Default>(v: &Grid<T>, m: usize) -> (Grid<T>, PadRecord) {
    let m = m.max(1);
    let total = v.dims.map(|d| d.div_ceil(m) * m - d);
    let rec = PadRecord {
        original: v.dims,
        low: total.map(|t| t / 2),
        high: total.map(|t| t - t / 2),
    };
    if rec.is_identity() {
        return (v.clone(), rec);
    }
    let dims = rec.padded_dims();
    let mut data = vec![T::default(); dims.iter().product()];
    let [d, h, w] = v.dims;
    for z in 0..d {
        for y in 0..h {
            let src = (z * h + y) * w;
            let dst = ((z + rec.low[0]) * dims[1] + y + rec.low[1]) * dims[2] + rec.low[2];
            data[dst..dst + w].copy_from_slice(&v.data[src..src + w]);
        }
    }
    let out = Grid {
        dims,
        spacing: v.spacing,
        orientation: v.orientation.clone(),
        data,
    };
    (out, rec)
}

/// Inverse of [`pad_to_multiple`].
pub fn crop<T: Copy>(v: &Grid<T>, rec: &PadRecord) -> Result<Grid<T>> {
    if v.dims != rec.padded_dims() {
        return Err(Error::contract(format!(
            "cannot crop {:?} with a record for padded dims {:?}",
            v.dims,
            rec.padded_dims()
        )));
    }
    let [d, h, w] = rec.original;
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            let src = ((z + rec.low[0]) * v.dims[1] + y + rec.low[1]) * v.dims[2] + rec.low[2];
            data.extend_from_slice(&v.data[src..src + w]);
        }
    }
    Ok(Grid {
        dims: rec.original,
        spacing: v.spacing,
        orientation: v.orientation.clone(),
        data,
    })
}
