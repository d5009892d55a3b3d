//! Volume-to-slice dataset construction: tumor-slice selection, per-slice
//! min-max normalisation, 8-bit export and optional single-breast crops.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BitSource, Laterality, SliceImage, SlicePair};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::write_gray_png;
use crate::manifest::{DatasetManifest, ManifestRecord, Split};
use crate::volume::{Volume, VolumeCase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideSplit {
    None,
    Midline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicePolicy {
    pub adjacent_fraction: f64,
    pub side_split: SideSplit,
    pub rng_seed: u64,
}

impl Default for SlicePolicy {
    fn default() -> Self {
        Self {
            adjacent_fraction: 0.20,
            side_split: SideSplit::None,
            rng_seed: 0,
        }
    }
}

impl SlicePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.adjacent_fraction) {
            return Err(Error::Config(format!(
                "adjacent_fraction {} outside [0, 1]",
                self.adjacent_fraction
            )));
        }
        Ok(())
    }
}

/// Tumor-bearing slice indices plus `round(fraction · count)` neighbours of
/// the tumor block, split before/after with any odd one placed before.
/// Neighbours falling outside the volume are dropped.
pub fn select_slices(mask_volume: &Volume, policy: &SlicePolicy) -> Vec<usize> {
    let tumor: Vec<usize> = (0..mask_volume.depth())
        .filter(|&z| mask_volume.slice_has_voxels(z))
        .collect();
    let (Some(&first), Some(&last)) = (tumor.first(), tumor.last()) else {
        return Vec::new();
    };
    let n_adj = (policy.adjacent_fraction * tumor.len() as f64).round() as usize;
    let after = n_adj / 2;
    let before = n_adj - after;
    let mut out: Vec<usize> = (first.saturating_sub(before)..first).collect();
    out.extend(&tumor);
    out.extend((last + 1..=last + after).filter(|&z| z < mask_volume.depth()));
    out
}

/// Per-slice min-max normalisation to `[0, 1]`; constant slices map to zeros.
pub fn normalize_slice(raw: &Grid) -> Result<SliceImage> {
    if !raw.all_finite() {
        return Err(Error::InvalidValue("slice contains non-finite values".into()));
    }
    let (lo, hi) = raw.min_max();
    let pixels = if hi > lo {
        let (lo, span) = (lo as f64, (hi - lo) as f64);
        raw.map(|v| (((v as f64 - lo) / span) as f32).clamp(0.0, 1.0))
    } else {
        Grid::zeros(raw.height(), raw.width())
    };
    SliceImage::new(pixels, BitSource::FloatNative)
}

pub fn export_slice(img: &SliceImage, path: &Path) -> Result<()> {
    write_gray_png(path, img.pixels())
}

/// Lateral half of every channel, split at column `floor(W/2)`.
///
/// The left half is `[0, floor(W/2))`; the right half takes the remaining
/// columns so the two widths always sum to `W`.
pub fn crop_single_breast(pair: &SlicePair, side: Side) -> Result<SlicePair> {
    let (h, w) = pair.shape();
    let mid = w / 2;
    let (x0, cw) = match side {
        Side::Left => (0, mid),
        Side::Right => (mid, w - mid),
    };
    let crop = |g: &Grid| g.crop(0, x0, h, cw);
    let pre = SliceImage::new(crop(pair.pre.pixels())?, pair.pre.bit_source())?;
    let post = SliceImage::new(crop(pair.post.pixels())?, pair.post.bit_source())?;
    let mask = pair.mask.as_ref().map(crop).transpose()?;
    Ok(SlicePair::new(
        pre,
        post,
        mask,
        pair.patient_id.clone(),
        pair.slice_index,
        Laterality::Unilateral,
    ))
}

fn binarize(g: &Grid) -> Grid {
    g.map(|v| if v != 0.0 { 1.0 } else { 0.0 })
}

fn patient_seed(seed: u64, patient: &str) -> u64 {
    let digest = Sha256::digest(patient.as_bytes());
    seed ^ u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Side holding more tumor voxels over the whole volume; ties (including
/// tumor-free cases) are broken by a per-patient seeded coin.
pub fn choose_side(case: &VolumeCase, seed: u64) -> Side {
    let (d, h, w) = case.mask_volume.shape();
    let mid = w / 2;
    let (mut left, mut right) = (0usize, 0usize);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if case.mask_volume.get(z, y, x) != 0.0 {
                    if x < mid {
                        left += 1;
                    } else {
                        right += 1;
                    }
                }
            }
        }
    }
    match left.cmp(&right) {
        std::cmp::Ordering::Greater => Side::Left,
        std::cmp::Ordering::Less => Side::Right,
        std::cmp::Ordering::Equal => {
            let mut rng = ChaCha8Rng::seed_from_u64(patient_seed(seed, &case.patient_id));
            if rng.random::<bool>() {
                Side::Left
            } else {
                Side::Right
            }
        }
    }
}

/// Result of [`build_dataset`]: the saved manifest plus skipped-case warnings.
#[derive(Debug)]
pub struct BuildOutput {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Writes `images/{patient}_{slice}_{pre,post}.png`, `masks/{patient}_{slice}.png`
/// and the manifest into `out_dir`. Records follow case order, then slice order.
pub fn build_dataset(
    cases: &[VolumeCase],
    policy: &SlicePolicy,
    split_map: &BTreeMap<String, Split>,
    out_dir: &Path,
) -> Result<BuildOutput> {
    policy.validate()?;
    for case in cases {
        if !split_map.contains_key(&case.patient_id) {
            return Err(Error::Config(format!(
                "split map has no entry for patient {}",
                case.patient_id
            )));
        }
        case.validate()?;
    }
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for case in cases {
        let indices = select_slices(&case.mask_volume, policy);
        if indices.is_empty() {
            warnings.push(format!("skipping case {}: mask has no tumor voxels", case.patient_id));
            continue;
        }
        let side = (policy.side_split == SideSplit::Midline).then(|| choose_side(case, policy.rng_seed));
        let split = split_map[&case.patient_id];
        for z in indices {
            let mut pair = SlicePair::new(
                normalize_slice(&case.pre_volume.slice(z))?,
                normalize_slice(&case.post_volume.slice(z))?,
                Some(binarize(&case.mask_volume.slice(z))),
                case.patient_id.clone(),
                z,
                case.laterality,
            );
            if let Some(side) = side {
                pair = crop_single_breast(&pair, side)?;
            }
            let key = format!("{}_{}", case.patient_id, z);
            let rec = ManifestRecord {
                relative_path_pre: format!("images/{key}_pre.png"),
                relative_path_post: format!("images/{key}_post.png"),
                relative_path_mask: Some(format!("masks/{key}.png")),
                patient_id: case.patient_id.clone(),
                slice_index: z,
                tumor_label: pair.tumor_label,
                laterality: pair.laterality,
                split,
            };
            export_slice(&pair.pre, &out_dir.join(&rec.relative_path_pre))?;
            export_slice(&pair.post, &out_dir.join(&rec.relative_path_post))?;
            write_gray_png(
                &out_dir.join(rec.relative_path_mask.as_ref().unwrap()),
                &pair.mask_or_zeros(),
            )?;
            records.push(rec);
        }
    }
    let manifest = DatasetManifest::new(records, policy.rng_seed);
    manifest.save(out_dir)?;
    Ok(BuildOutput { manifest, warnings })
}
