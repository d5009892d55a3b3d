//! 3-d volumes and the case-directory layout consumed by preprocessing.
//!
//! Two on-disk formats are readable: a minimal raw container (`.cdv`:
//! magic `CDV1`, little-endian `u32` depth/height/width, then `f32`
//! voxels in z-y-x order) and uncompressed single-file NIfTI-1 (`.nii`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Laterality;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::manifest::Split;

const RAW_MAGIC: &[u8; 4] = b"CDV1";

/// Dense `depth × height × width` intensity volume, z-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(depth: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != depth * height * width {
            return Err(Error::Shape(format!(
                "volume data has {} voxels, expected {depth}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            depth,
            height,
            width,
            data,
        })
    }

    pub fn zeros(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
            data: vec![0.0; depth * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[(z * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        self.data[(z * self.height + y) * self.width + x] = v;
    }

    fn plane(&self, z: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[z * n..(z + 1) * n]
    }

    /// Axial slice `z`.
    pub fn slice(&self, z: usize) -> Grid {
        Grid::new(self.height, self.width, self.plane(z).to_vec()).expect("plane size")
    }

    pub fn slice_has_voxels(&self, z: usize) -> bool {
        self.plane(z).iter().any(|&v| v != 0.0)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + self.data.len() * 4);
        bytes.extend_from_slice(RAW_MAGIC);
        for d in [self.depth, self.height, self.width] {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Adapter seam for volume file formats.
pub trait VolumeReader {
    fn read(&self, path: &Path) -> Result<Volume>;
}

pub struct RawVolumeReader;

impl VolumeReader for RawVolumeReader {
    fn read(&self, path: &Path) -> Result<Volume> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
            return Err(Error::format(path, "not a CDV1 volume"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (d, h, w) = (dim(0), dim(1), dim(2));
        let body = &bytes[16..];
        if body.len() != d * h * w * 4 {
            return Err(Error::format(path, "voxel payload does not match header dims"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Volume::new(d, h, w, data)
    }
}

/// Uncompressed single-file NIfTI-1 (`n+1`), little- or big-endian,
/// datatypes u8/i16/i32/f32/f64/u16 with slope/intercept scaling.
pub struct NiftiReader;

impl VolumeReader for NiftiReader {
    fn read(&self, path: &Path) -> Result<Volume> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 352 {
            return Err(Error::format(path, "file too short for a NIfTI-1 header"));
        }
        let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == 348;
        let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348;
        if !le && !be {
            return Err(Error::format(path, "sizeof_hdr is not 348"));
        }
        if &bytes[344..347] != b"n+1" {
            return Err(Error::format(path, "only single-file n+1 NIfTI is supported"));
        }
        let i16_at = |o: usize| {
            let b: [u8; 2] = bytes[o..o + 2].try_into().unwrap();
            if le {
                i16::from_le_bytes(b)
            } else {
                i16::from_be_bytes(b)
            }
        };
        let f32_at = |o: usize| {
            let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
            if le {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        };
        let ndim = i16_at(40);
        if !(2..=4).contains(&ndim) {
            return Err(Error::format(path, format!("unsupported dimensionality {ndim}")));
        }
        let nx = i16_at(42).max(1) as usize;
        let ny = i16_at(44).max(1) as usize;
        let nz = if ndim >= 3 { i16_at(46).max(1) as usize } else { 1 };
        let datatype = i16_at(70);
        let vox_offset = f32_at(108) as usize;
        let slope = f32_at(112);
        let inter = f32_at(116);
        let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
            (1.0, 0.0)
        } else {
            (slope, inter)
        };
        let n = nx * ny * nz;
        let width = match datatype {
            2 => 1,
            4 | 512 => 2,
            8 | 16 => 4,
            64 => 8,
            other => return Err(Error::format(path, format!("unsupported NIfTI datatype {other}"))),
        };
        let body = bytes
            .get(vox_offset..vox_offset + n * width)
            .ok_or_else(|| Error::format(path, "voxel payload truncated"))?;
        let data = body
            .chunks_exact(width)
            .map(|c| {
                let raw = match (datatype, le) {
                    (2, _) => c[0] as f64,
                    (4, true) => i16::from_le_bytes([c[0], c[1]]) as f64,
                    (4, false) => i16::from_be_bytes([c[0], c[1]]) as f64,
                    (512, true) => u16::from_le_bytes([c[0], c[1]]) as f64,
                    (512, false) => u16::from_be_bytes([c[0], c[1]]) as f64,
                    (8, true) => i32::from_le_bytes(c.try_into().unwrap()) as f64,
                    (8, false) => i32::from_be_bytes(c.try_into().unwrap()) as f64,
                    (16, true) => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    (16, false) => f32::from_be_bytes(c.try_into().unwrap()) as f64,
                    (64, true) => f64::from_le_bytes(c.try_into().unwrap()),
                    (_, _) => f64::from_be_bytes(c.try_into().unwrap()),
                };
                (raw * slope as f64 + inter as f64) as f32
            })
            .collect();
        // NIfTI stores x fastest, then y, then z: already z-y-x row-major.
        Volume::new(nz, ny, nx, data)
    }
}

/// Reads a volume, choosing the reader by file extension.
pub fn read_volume(path: &Path) -> Result<Volume> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("cdv") => RawVolumeReader.read(path),
        Some("nii") => NiftiReader.read(path),
        _ => Err(Error::format(path, "unknown volume extension (expected .cdv or .nii)")),
    }
}

/// Paired pre/post volumes and the binary tumor mask of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeCase {
    pub pre_volume: Volume,
    pub post_volume: Volume,
    pub mask_volume: Volume,
    pub patient_id: String,
    pub laterality: Laterality,
}

impl VolumeCase {
    pub fn validate(&self) -> Result<()> {
        let s = self.pre_volume.shape();
        if self.post_volume.shape() != s || self.mask_volume.shape() != s {
            return Err(Error::Shape(format!(
                "case {}: pre {:?}, post {:?}, mask {:?}",
                self.patient_id,
                s,
                self.post_volume.shape(),
                self.mask_volume.shape()
            )));
        }
        Ok(())
    }
}

/// `case.json` inside each case directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseMeta {
    pub patient_id: String,
    pub laterality: Laterality,
    pub split: Split,
}

pub const CASE_META_FILE: &str = "case.json";

/// Writes `<dir>/<patient>/{pre,post,mask}.cdv` and `case.json`.
pub fn write_case_dir(dir: &Path, case: &VolumeCase, split: Split) -> Result<PathBuf> {
    let case_dir = dir.join(&case.patient_id);
    fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
    case.pre_volume.write_raw(&case_dir.join("pre.cdv"))?;
    case.post_volume.write_raw(&case_dir.join("post.cdv"))?;
    case.mask_volume.write_raw(&case_dir.join("mask.cdv"))?;
    let meta = CaseMeta {
        patient_id: case.patient_id.clone(),
        laterality: case.laterality,
        split,
    };
    let p = case_dir.join(CASE_META_FILE);
    fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(case_dir)
}

fn find_phase(case_dir: &Path, stem: &str) -> Result<PathBuf> {
    for ext in ["cdv", "nii"] {
        let p = case_dir.join(format!("{stem}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::NotFound(format!("{}/{stem}.(cdv|nii)", case_dir.display())))
}

/// Reads every case directory under `dir` (sorted by name) together with
/// the split assignment recorded in each `case.json`.
pub fn read_case_dirs(dir: &Path) -> Result<(Vec<VolumeCase>, BTreeMap<String, Split>)> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CASE_META_FILE).is_file())
        .collect();
    entries.sort();
    let mut cases = Vec::with_capacity(entries.len());
    let mut splits = BTreeMap::new();
    for case_dir in entries {
        let meta_path = case_dir.join(CASE_META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CaseMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let case = VolumeCase {
            pre_volume: read_volume(&find_phase(&case_dir, "pre")?)?,
            post_volume: read_volume(&find_phase(&case_dir, "post")?)?,
            mask_volume: read_volume(&find_phase(&case_dir, "mask")?)?,
            patient_id: meta.patient_id.clone(),
            laterality: meta.laterality,
        };
        case.validate()?;
        splits.insert(meta.patient_id, meta.split);
        cases.push(case);
    }
    Ok((cases, splits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(2, 3, 4, (0..24).map(|i| i as f32 * 0.5).collect()).unwrap();
        let p = dir.path().join("v.cdv");
        v.write_raw(&p).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
    }

    fn nifti_bytes(nx: i16, ny: i16, nz: i16, data: &[i16], slope: f32) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dims = [3i16, nx, ny, nz, 1, 1, 1, 1];
        for (i, d) in dims.iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&4i16.to_le_bytes());
        h[72..74].copy_from_slice(&16i16.to_le_bytes());
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[112..116].copy_from_slice(&slope.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        for v in data {
            h.extend_from_slice(&v.to_le_bytes());
        }
        h
    }

    #[test]
    fn nifti_int16_with_slope() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        let data: Vec<i16> = (0..2 * 3 * 4).collect();
        fs::write(&p, nifti_bytes(4, 3, 2, &data, 2.0)).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.shape(), (2, 3, 4));
        // x fastest: voxel (z=1, y=2, x=3) is the last one.
        assert_eq!(v.get(1, 2, 3), 23.0 * 2.0);
        assert_eq!(v.get(0, 1, 0), 4.0 * 2.0);
    }

    #[test]
    fn nifti_rejects_pair_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        let mut b = nifti_bytes(2, 2, 2, &[0; 8], 1.0);
        b[344..348].copy_from_slice(b"ni1\0");
        fs::write(&p, b).unwrap();
        assert!(read_volume(&p).is_err());
    }
}
