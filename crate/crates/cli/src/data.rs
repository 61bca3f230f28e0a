//! Directory layout: `<prefix>_<id>.nii` files, paired by `id`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ratlesnet::train::Sample;
use ratlesnet::volume::{read_mask, read_volume, Mask};

/// `id` of a `<prefix>_<id>.nii` file name.
pub fn file_id(path: &Path) -> Option<String> {
    let stem = path.file_name()?.to_str()?.strip_suffix(".nii")?;
    stem.rsplit_once('_').map(|(_, id)| id.to_string())
}

/// Files in `dir` named `<prefix>_<id>.nii`, keyed by id.
pub fn list(dir: &Path, prefix: &str) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for e in entries {
        let path = e.with_context(|| format!("listing {}", dir.display()))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with(&format!("{prefix}_")) {
            if let Some(id) = file_id(&path) {
                out.insert(id, path);
            }
        }
    }
    Ok(out)
}

/// Masks named `<prefix>_<id>.nii` in `dir`, ordered by id.
pub fn masks(dir: &Path, prefix: &str) -> anyhow::Result<Vec<(String, Mask)>> {
    list(dir, prefix)?
        .into_iter()
        .map(|(id, p)| Ok((id, read_mask(&p)?)))
        .collect()
}

/// Loads `image_<id>.nii` / `label_<id>.nii` pairs as training samples.
pub fn samples(dir: &Path, multiple: usize) -> anyhow::Result<Vec<Sample>> {
    let images = list(dir, "image")?;
    let labels = list(dir, "label")?;
    if images.is_empty() {
        bail!(ratlesnet::Error::Contract(format!("no image_<id>.nii files in {}", dir.display())));
    }
    images
        .iter()
        .map(|(id, img)| {
            let lab = labels.get(id).ok_or_else(|| {
                ratlesnet::Error::Contract(format!("{} has no matching label_{id}.nii", img.display()))
            })?;
            let sample = Sample::new(id.clone(), &read_volume(img)?, &read_mask(lab)?, multiple)
                .with_context(|| format!("loading {}", img.display()))?;
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_from_names() {
        assert_eq!(file_id(Path::new("a/image_0003.nii")).as_deref(), Some("0003"));
        assert_eq!(file_id(Path::new("pred_x_12.nii")).as_deref(), Some("12"));
        assert_eq!(file_id(Path::new("image_0003.nii.gz")), None);
        assert_eq!(file_id(Path::new("manifest.csv")), None);
    }
}
