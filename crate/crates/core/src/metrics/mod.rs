//! Overlap, surface and distance metrics between binary masks,
//! connected-component post-processing, and cohort statistics.
//!
//! Physical quantities use the mask spacing `(sz, sy, sx)` in millimetres.

mod components;
mod report;
mod stats;

pub use components::{
    artifact_sizes, calibrate_threshold, label_components, remove_islands_fill_holes, ComponentLabeling,
    DEFAULT_THRESHOLD,
};
pub use report::{evaluate_cohort, CohortEvaluation, MetricReport, Stat, Summary};
pub use stats::{paired_permutation_test, DEFAULT_ITERATIONS};

use crate::error::{Error, Result};
use crate::volume::Mask;

/// Offsets of the six face neighbours.
pub(crate) const NEIGHBOURS: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// Face neighbour of `(z, y, x)` in direction `n`, if inside the grid.
pub(crate) fn neighbour(dims: [usize; 3], p: [usize; 3], n: [isize; 3]) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let v = p[a].checked_add_signed(n[a])?;
        if v >= dims[a] {
            return None;
        }
        out[a] = v;
    }
    Some(out)
}

fn same_grid(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::contract(format!("mask dims differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// Dice overlap `2|A∩B| / (|A| + |B|)` of raw label slices; two empty sets
/// score 1.
pub fn dice_labels(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x & y);
        total += usize::from(x) + usize::from(y);
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Dice overlap of two masks on the same grid; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    same_grid(a, b)?;
    Ok(dice_labels(a.data(), b.data()))
}

/// Total physical area of the faces separating lesion voxels from
/// non-lesion voxels or the outside of the grid.
pub fn surface_area(m: &Mask) -> Result<f64> {
    if m.count() == 0 {
        return Err(Error::contract("surface area of an empty mask"));
    }
    let [sz, sy, sx] = m.spacing;
    let face = [sy * sx, sz * sx, sz * sy];
    let mut area = 0.0;
    for (i, &v) in m.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        let p = m.coords(i);
        for (k, n) in NEIGHBOURS.iter().enumerate() {
            let exposed = match neighbour(m.dims, p, *n) {
                Some([z, y, x]) => !m.get(z, y, x),
                None => true,
            };
            if exposed {
                area += face[k / 2];
            }
        }
    }
    Ok(area)
}

/// `area^1.5 / volume`; absent for an empty mask.
pub fn compactness(m: &Mask) -> Option<f64> {
    let area = surface_area(m).ok()?;
    let volume = m.count() as f64 * m.voxel_volume();
    Some(area.powf(1.5) / volume)
}

/// Lesion voxels with at least one face neighbour that is non-lesion or
/// outside the grid, in scan order.
pub fn boundary_voxels(m: &Mask) -> Result<Vec<[usize; 3]>> {
    if m.count() == 0 {
        return Err(Error::contract("boundary of an empty mask"));
    }
    Ok(m
        .data()
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v == 1)
        .map(|(i, _)| m.coords(i))
        .filter(|&p| {
            NEIGHBOURS.iter().any(|n| match neighbour(m.dims, p, *n) {
                Some([z, y, x]) => !m.get(z, y, x),
                None => true,
            })
        })
        .collect())
}

fn physical(points: &[[usize; 3]], spacing: [f64; 3]) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|p| [0, 1, 2].map(|a| p[a] as f64 * spacing[a]))
        .collect()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// `max over a of min over b` of squared distances, exact. The inner scan
/// stops as soon as it cannot raise the running maximum.
fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut worst: f64 = 0.0;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let d = dist2(a, b);
            if d < best {
                best = d;
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Symmetric Hausdorff distance in mm between the boundary voxel centres of
/// two masks; absent when either mask is empty.
pub fn hausdorff(a: &Mask, b: &Mask) -> Result<Option<f64>> {
    same_grid(a, b)?;
    if a.spacing != b.spacing {
        return Err(Error::contract(format!(
            "mask spacings differ: {:?} vs {:?}",
            a.spacing, b.spacing
        )));
    }
    if a.count() == 0 || b.count() == 0 {
        return Ok(None);
    }
    let pa = physical(&boundary_voxels(a)?, a.spacing);
    let pb = physical(&boundary_voxels(b)?, b.spacing);
    Ok(Some(directed(&pa, &pb).max(directed(&pb, &pa)).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], spacing: [f64; 3], on: &[[usize; 3]]) -> Mask {
        let mut m = Mask::empty(dims, spacing).unwrap();
        for &[z, y, x] in on {
            m.set(z, y, x, true);
        }
        m
    }

    #[test]
    fn dice_closed_forms() {
        let a = mask([1, 1, 3], [1.0; 3], &[[0, 0, 0], [0, 0, 1]]);
        let b = mask([1, 1, 3], [1.0; 3], &[[0, 0, 1], [0, 0, 2]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let e = Mask::empty([1, 1, 3], [1.0; 3]).unwrap();
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
        assert!(dice(&a, &Mask::empty([1, 3, 1], [1.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn surface_of_voxel_and_block() {
        let one = mask([3, 3, 3], [1.0; 3], &[[1, 1, 1]]);
        assert_eq!(surface_area(&one).unwrap(), 6.0);
        let block = Mask::from_fn([2, 2, 2], [1.0; 3], |_, _, _| true).unwrap();
        assert_eq!(surface_area(&block).unwrap(), 24.0);
        let aniso = mask([1, 1, 1], [1.0, 0.117, 0.117], &[[0, 0, 0]]);
        let expect = 2.0 * 0.117 * 0.117 + 4.0 * 0.117;
        assert!((surface_area(&aniso).unwrap() - expect).abs() < 1e-12);
        assert!(surface_area(&Mask::empty([1, 1, 1], [1.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn compactness_closed_forms() {
        let one = mask([1, 1, 1], [1.0; 3], &[[0, 0, 0]]);
        assert!((compactness(&one).unwrap() - 6f64.powf(1.5)).abs() < 1e-9);
        let block = Mask::from_fn([2, 2, 2], [1.0; 3], |_, _, _| true).unwrap();
        assert!((compactness(&block).unwrap() - 24f64.powf(1.5) / 8.0).abs() < 1e-9);
        assert_eq!(compactness(&Mask::empty([1, 1, 1], [1.0; 3]).unwrap()), None);
    }

    #[test]
    fn boundary_counts() {
        let one = mask([3, 3, 3], [1.0; 3], &[[2, 0, 1]]);
        assert_eq!(boundary_voxels(&one).unwrap(), vec![[2, 0, 1]]);
        let solid = Mask::from_fn([5, 5, 5], [1.0; 3], |z, y, x| (1..4).contains(&z) && (1..4).contains(&y) && (1..4).contains(&x)).unwrap();
        let b = boundary_voxels(&solid).unwrap();
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&[2, 2, 2]));
    }

    #[test]
    fn hollow_shell_is_its_own_boundary() {
        let shell = Mask::from_fn([6, 6, 6], [1.0; 3], |z, y, x| {
            let inside = |v: usize| (1..5).contains(&v);
            let core = |v: usize| (2..4).contains(&v);
            inside(z) && inside(y) && inside(x) && !(core(z) && core(y) && core(x))
        })
        .unwrap();
        assert_eq!(boundary_voxels(&shell).unwrap().len(), shell.count());
    }

    #[test]
    fn hausdorff_closed_forms() {
        let sp = [1.0, 0.117, 0.117];
        let a = mask([5, 2, 2], sp, &[[0, 1, 1]]);
        let b = mask([5, 2, 2], sp, &[[3, 1, 1]]);
        assert!((hausdorff(&a, &b).unwrap().unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(hausdorff(&a, &a).unwrap(), Some(0.0));
        let e = Mask::empty([5, 2, 2], sp).unwrap();
        assert_eq!(hausdorff(&a, &e).unwrap(), None);
    }
}
