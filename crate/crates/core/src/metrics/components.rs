//! Six-connected component labelling and hole / island removal.

use std::collections::VecDeque;

use super::{neighbour, NEIGHBOURS};
use crate::volume::Mask;

/// Components of this size or smaller are removed (islands) or filled
/// (holes).
pub const DEFAULT_THRESHOLD: usize = 20;

/// Labelling of the foreground or background voxels of a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub dims: [usize; 3],
    /// Which voxel value was labelled.
    pub foreground: bool,
    /// `0` for voxels outside every component, otherwise `1..=count`.
    pub labels: Vec<u32>,
    /// Voxel count of component `l` at index `l - 1`.
    pub sizes: Vec<usize>,
    /// Whether component `l` (index `l - 1`) reaches the edge of the grid.
    pub touches_border: Vec<bool>,
}

impl ComponentLabeling {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn size(&self, label: u32) -> usize {
        self.sizes[label as usize - 1]
    }

    /// Labels of the components touching the grid edge.
    pub fn border_labels(&self) -> Vec<u32> {
        (1..=self.count() as u32)
            .filter(|&l| self.touches_border[l as usize - 1])
            .collect()
    }
}

fn on_border(dims: [usize; 3], p: [usize; 3]) -> bool {
    (0..3).any(|a| p[a] == 0 || p[a] + 1 == dims[a])
}

/// Flood-fill labelling of the voxels equal to `foreground` under
/// 6-connectivity, numbered in scan order of their first voxel.
pub fn label_components(m: &Mask, foreground: bool) -> ComponentLabeling {
    let want = u8::from(foreground);
    let dims = m.dims;
    let mut labels = vec![0u32; m.len()];
    let mut sizes = Vec::new();
    let mut touches = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..m.len() {
        if m.data()[start] != want || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let (mut size, mut border) = (0, false);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = m.coords(i);
            border |= on_border(dims, p);
            for n in &NEIGHBOURS {
                if let Some([z, y, x]) = neighbour(dims, p, *n) {
                    let j = m.index(z, y, x);
                    if m.data()[j] == want && labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
        touches.push(border);
    }
    ComponentLabeling {
        dims,
        foreground,
        labels,
        sizes,
        touches_border: touches,
    }
}

/// Deletes foreground components of at most `threshold` voxels, then fills
/// enclosed background components (not reaching the grid edge) of at most
/// `threshold` voxels.
pub fn remove_islands_fill_holes(m: &Mask, threshold: usize) -> Mask {
    let mut out = m.clone();
    let fg = label_components(m, true);
    for (v, &l) in out.data.iter_mut().zip(&fg.labels) {
        if l != 0 && fg.size(l) <= threshold {
            *v = 0;
        }
    }
    let bg = label_components(&out, false);
    for (v, &l) in out.data.iter_mut().zip(&bg.labels) {
        if l != 0 && bg.size(l) <= threshold && !bg.touches_border[l as usize - 1] {
            *v = 1;
        }
    }
    out
}

/// Sizes of the artifacts of one mask: every foreground component except
/// the largest, and every enclosed background component.
pub fn artifact_sizes(m: &Mask) -> Vec<usize> {
    let fg = label_components(m, true);
    let mut sizes = fg.sizes.clone();
    if let Some(i) = (0..sizes.len()).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))) {
        sizes.remove(i);
    }
    let bg = label_components(m, false);
    sizes.extend(
        bg.sizes
            .iter()
            .zip(&bg.touches_border)
            .filter(|(_, &b)| !b)
            .map(|(&s, _)| s),
    );
    sizes
}

/// Smallest threshold at which at least `fraction` of all artifacts in
/// `masks` would be removed; `None` when there are no artifacts.
pub fn calibrate_threshold(masks: &[Mask], fraction: f64) -> Option<usize> {
    let mut sizes: Vec<usize> = masks.iter().flat_map(artifact_sizes).collect();
    if sizes.is_empty() {
        return None;
    }
    sizes.sort_unstable();
    let need = ((fraction.clamp(0.0, 1.0) * sizes.len() as f64).ceil() as usize).max(1);
    Some(sizes[need - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(len: usize, at: usize, dims: [usize; 3]) -> Vec<[usize; 3]> {
        (0..len).map(|i| [at, 1 + i / (dims[2] - 2), 1 + i % (dims[2] - 2)]).collect()
    }

    #[test]
    fn diagonal_voxels_are_separate() {
        let mut m = Mask::empty([1, 2, 2], [1.0; 3]).unwrap();
        m.set(0, 0, 0, true);
        m.set(0, 1, 1, true);
        let l = label_components(&m, true);
        assert_eq!(l.sizes, vec![1, 1]);
    }

    #[test]
    fn solid_block_is_one_component() {
        let m = Mask::from_fn([4, 5, 6], [1.0; 3], |z, _, x| z > 0 && x < 4).unwrap();
        let l = label_components(&m, true);
        assert_eq!(l.sizes, vec![3 * 5 * 4]);
        let bg = label_components(&m, false);
        assert_eq!(bg.border_labels().len(), bg.count());
    }

    #[test]
    fn island_threshold_is_inclusive() {
        let dims = [3, 8, 8];
        for (len, kept) in [(20, false), (21, true)] {
            let mut m = Mask::empty(dims, [1.0; 3]).unwrap();
            for [z, y, x] in line(len, 1, dims) {
                m.set(z, y, x, true);
            }
            assert_eq!(m.count(), len);
            let out = remove_islands_fill_holes(&m, 20);
            assert_eq!(out.count(), if kept { len } else { 0 });
        }
    }

    #[test]
    fn small_hole_filled_large_island_kept() {
        let inside = |v: usize, lo: usize, hi: usize| (lo..hi).contains(&v);
        let mut m = Mask::from_fn([9, 9, 20], [1.0; 3], |z, y, x| {
            let cube = inside(z, 1, 8) && inside(y, 1, 8) && inside(x, 1, 8);
            let island = inside(z, 2, 4) && inside(y, 2, 7) && inside(x, 12, 17);
            cube || island
        })
        .unwrap();
        for x in 2..7 {
            m.set(4, 4, x, false);
        }
        let l = label_components(&m, true);
        assert_eq!(l.sizes, vec![7 * 7 * 7 - 5, 50]);
        let out = remove_islands_fill_holes(&m, 20);
        assert_eq!(out.count(), m.count() + 5);
        assert!(out.get(4, 4, 4) && out.get(2, 2, 12));
        assert_eq!(remove_islands_fill_holes(&out, 20), out);
    }

    #[test]
    fn empty_mask_stays_empty() {
        let m = Mask::empty([4, 4, 4], [1.0; 3]).unwrap();
        assert_eq!(remove_islands_fill_holes(&m, 20), m);
    }

    #[test]
    fn calibration_picks_ninety_percent_quantile() {
        let dims = [3, 12, 12];
        let mut m = Mask::empty(dims, [1.0; 3]).unwrap();
        // a 100-voxel lesion plus islands of 1..=6 voxels
        for y in 0..10 {
            for x in 0..10 {
                m.set(0, y, x, true);
            }
        }
        for size in 1..=6 {
            for y in 0..size {
                m.set(2, y, 2 * (size - 1), true);
            }
        }
        let arts = artifact_sizes(&m);
        assert_eq!(arts.len(), 6);
        assert_eq!(calibrate_threshold(&[m], 0.9), Some(6));
        assert_eq!(calibrate_threshold(&[], 0.9), None);
    }
}
