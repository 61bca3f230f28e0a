//! Synthetic brain phantoms with known lesion masks.
//!
//! A phantom is an ellipsoidal "brain" of intensity 1 on a zero background.
//! Lesions are a union of random ellipsoids inside the brain, restricted to
//! the hemisphere on the high-`x` side of the midline, at intensity
//! `1 + gain`. Gaussian noise is added last; the mask is the noiseless
//! lesion region.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{write_mask, write_volume, Mask, Volume};

/// Brain semi-axes as a fraction of each dimension.
const BRAIN_FRACTION: f64 = 0.42;
/// Blob semi-axes as a fraction of each dimension, `[min, max)`.
const BLOB_FRACTION: (f64, f64) = (0.08, 0.2);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// `(depth, height, width)` in voxels.
    pub dims: [usize; 3],
    /// `(sz, sy, sx)` in mm.
    pub spacing: [f64; 3],
    pub lesion_blobs: usize,
    pub lesion_intensity_gain: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [16, 32, 32],
            spacing: [1.0, 0.117, 0.117],
            lesion_blobs: 3,
            lesion_intensity_gain: 0.5,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::Config(format!("phantom dims must be at least 4, got {:?}", self.dims)));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Config(format!("phantom spacing must be positive, got {:?}", self.spacing)));
        }
        if !self.lesion_intensity_gain.is_finite() {
            return Err(Error::Config("lesion intensity gain must be finite".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    fn centre(&self) -> [f64; 3] {
        self.dims.map(|d| (d as f64 - 1.0) / 2.0)
    }

    /// Whether voxel `p` lies in the brain ellipsoid.
    pub fn in_brain(&self, p: [usize; 3]) -> bool {
        let c = self.centre();
        (0..3)
            .map(|a| ((p[a] as f64 - c[a]) / (BRAIN_FRACTION * self.dims[a] as f64)).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Whether voxel `p` lies strictly in the lesion hemisphere.
    pub fn in_lesion_hemisphere(&self, p: [usize; 3]) -> bool {
        p[2] as f64 > self.centre()[2]
    }
}

struct Blob {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Blob {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.centre[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Renders one phantom and its ground-truth mask.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, Mask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.dims;
    let eligible: Vec<[usize; 3]> = (0..d)
        .flat_map(|z| (0..h).flat_map(move |y| (0..w).map(move |x| [z, y, x])))
        .filter(|&p| spec.in_brain(p) && spec.in_lesion_hemisphere(p))
        .collect();
    if eligible.is_empty() && spec.lesion_blobs > 0 {
        return Err(Error::Config(format!("dims {:?} leave no room for lesions", spec.dims)));
    }
    let blobs: Vec<Blob> = (0..spec.lesion_blobs)
        .map(|_| {
            let c = eligible[rng.random_range(0..eligible.len())];
            Blob {
                centre: c.map(|v| v as f64),
                radii: [0, 1, 2].map(|a| {
                    (rng.random_range(BLOB_FRACTION.0..BLOB_FRACTION.1) * spec.dims[a] as f64).max(0.75)
                }),
            }
        })
        .collect();

    let mask = Mask::from_fn(spec.dims, spec.spacing, |z, y, x| {
        let p = [z, y, x];
        spec.in_brain(p) && spec.in_lesion_hemisphere(p) && blobs.iter().any(|b| b.contains(p))
    })?;
    let mut data: Vec<f64> = mask
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l == 1 {
                1.0 + spec.lesion_intensity_gain
            } else if spec.in_brain(mask.coords(i)) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
    }
    Ok((Volume::new(spec.dims, spec.spacing, data)?, mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomItem {
    pub id: usize,
    pub seed: u64,
    pub sham: bool,
    pub volume: Volume,
    pub mask: Mask,
}

/// `n` phantoms from `template` with per-item seeds drawn from `seed`. The
/// `round(sham_fraction * n)` sham items, chosen by a seeded shuffle, have
/// no lesions.
pub fn generate_cohort(n: usize, template: &PhantomSpec, sham_fraction: f64, seed: u64) -> Result<Vec<PhantomItem>> {
    if n < 1 {
        return Err(Error::Config("cohort size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&sham_fraction) {
        return Err(Error::Config(format!("sham fraction must lie in [0, 1], got {sham_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let shams = (sham_fraction * n as f64).round() as usize;
    let mut is_sham = vec![false; n];
    for &i in &order[..shams] {
        is_sham[i] = true;
    }
    (0..n)
        .map(|i| {
            let spec = PhantomSpec {
                seed: seeds[i],
                lesion_blobs: if is_sham[i] { 0 } else { template.lesion_blobs },
                ..template.clone()
            };
            let (volume, mask) = generate(&spec)?;
            Ok(PhantomItem {
                id: i,
                seed: seeds[i],
                sham: is_sham[i],
                volume,
                mask,
            })
        })
        .collect()
}

/// File names of item `id`.
pub fn item_file_names(id: usize) -> (String, String) {
    (format!("image_{id:04}.nii"), format!("label_{id:04}.nii"))
}

/// Writes `image_####.nii` / `label_####.nii` pairs and `manifest.csv`
/// (`id,seed,sham_flag,lesion_voxels`).
pub fn write_cohort(items: &[PhantomItem], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("id,seed,sham_flag,lesion_voxels\n");
    for it in items {
        let (img, lab) = item_file_names(it.id);
        write_volume(&it.volume, dir.join(img))?;
        write_mask(&it.mask, dir.join(lab))?;
        writeln!(manifest, "{:04},{},{},{}", it.id, it.seed, u8::from(it.sham), it.mask.count()).expect("string write");
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_blobs_is_sham() {
        let (_, m) = generate(&PhantomSpec {
            lesion_blobs: 0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn same_seed_same_phantom() {
        let s = PhantomSpec {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let t = PhantomSpec { seed: 10, ..s.clone() };
        assert_ne!(generate(&s).unwrap().0, generate(&t).unwrap().0);
    }

    #[test]
    fn noiseless_lesion_is_separable() {
        let s = PhantomSpec {
            noise_sigma: 0.0,
            seed: 4,
            ..Default::default()
        };
        let (v, m) = generate(&s).unwrap();
        assert!(m.count() > 0);
        for (x, &l) in v.data().iter().zip(m.data()) {
            assert_eq!(l == 1, *x == 1.5);
            assert!([0.0, 1.0, 1.5].contains(x));
            assert_eq!(l == 1, *x > 1.25);
        }
    }

    #[test]
    fn lesion_stays_in_brain_hemisphere() {
        for seed in 0..20 {
            let s = PhantomSpec { seed, lesion_blobs: 5, ..Default::default() };
            let (_, m) = generate(&s).unwrap();
            assert!(m.count() > 0);
            for i in 0..m.len() {
                if m.data()[i] == 1 {
                    let p = m.coords(i);
                    assert!(s.in_brain(p) && s.in_lesion_hemisphere(p));
                }
            }
        }
    }

    #[test]
    fn cohort_shams_and_seeds() {
        let t = PhantomSpec::default();
        let c = generate_cohort(10, &t, 0.3, 1).unwrap();
        assert_eq!(c.iter().filter(|i| i.sham).count(), 3);
        assert!(c.iter().all(|i| i.sham == (i.mask.count() == 0)));
        let none = generate_cohort(6, &t, 0.0, 1).unwrap();
        assert!(none.iter().all(|i| i.mask.count() > 0));
        assert!(generate_cohort(0, &t, 0.0, 1).is_err());
        assert!(generate_cohort(2, &t, 1.5, 1).is_err());
    }
}
