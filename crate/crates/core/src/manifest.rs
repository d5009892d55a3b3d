//! Dataset manifest: `header.json` plus one JSON record per line in
//! `manifest.jsonl`. Paths are relative to the manifest directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BitSource, Laterality, SliceImage, SlicePair};
use crate::error::{Error, Result};
use crate::io::read_gray_png;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const HEADER_FILE: &str = "header.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub relative_path_pre: String,
    pub relative_path_post: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_path_mask: Option<String>,
    pub patient_id: String,
    pub slice_index: usize,
    pub tumor_label: bool,
    pub laterality: Laterality,
    pub split: Split,
}

impl ManifestRecord {
    /// Stem shared by generated outputs for this record.
    pub fn key(&self) -> String {
        format!("{}_{}", self.patient_id, self.slice_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub schema_version: u32,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, seed: u64) -> Self {
        Self {
            records,
            schema_version: SCHEMA_VERSION,
            seed,
        }
    }

    /// Patients that appear in more than one split.
    pub fn split_leaks(&self) -> Vec<String> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        let mut leaks = Vec::new();
        for r in &self.records {
            match seen.get(r.patient_id.as_str()) {
                Some(s) if *s != r.split => {
                    if !leaks.contains(&r.patient_id) {
                        leaks.push(r.patient_id.clone());
                    }
                }
                Some(_) => {}
                None => {
                    seen.insert(&r.patient_id, r.split);
                }
            }
        }
        leaks
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Writes `header.json` and `manifest.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = ManifestHeader {
            schema_version: self.schema_version,
            seed: self.seed,
        };
        let header_path = dir.join(HEADER_FILE);
        let mut header_json = serde_json::to_string_pretty(&header)?;
        header_json.push('\n');
        fs::write(&header_path, header_json).map_err(|e| Error::io(&header_path, e))?;

        let path = dir.join(MANIFEST_FILE);
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)?;
            writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads a manifest from `manifest.jsonl` (or a directory holding it)
    /// and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::load_unchecked(path)?;
        let root = manifest_root(path);
        let mut missing = Vec::new();
        for r in &m.records {
            let paths = [
                Some(&r.relative_path_pre),
                Some(&r.relative_path_post),
                r.relative_path_mask.as_ref(),
            ];
            for p in paths.into_iter().flatten() {
                if !root.join(p).is_file() {
                    missing.push(p.clone());
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::NotFound(format!(
                "{} manifest file(s) missing under {}: {}",
                missing.len(),
                root.display(),
                missing.join(", ")
            )));
        }
        Ok(m)
    }

    /// Parses without touching the referenced image files.
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let root = manifest_root(path);
        let header_path = root.join(HEADER_FILE);
        let header_text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: ManifestHeader =
            serde_json::from_str(&header_text).map_err(|e| Error::format(&header_path, e.to_string()))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                &header_path,
                format!("unsupported schema_version {}", header.schema_version),
            ));
        }
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord =
                serde_json::from_str(line).map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(Self {
            records,
            schema_version: header.schema_version,
            seed: header.seed,
        })
    }

    /// SHA-256 over the serialized header and records.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.schema_version.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("record serializes"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Directory a manifest path refers to (the path itself if a directory).
pub fn manifest_root(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

/// Reads the images behind one record as a [`SlicePair`].
pub fn load_pair(root: &Path, record: &ManifestRecord) -> Result<SlicePair> {
    let pre = read_gray_png(&root.join(&record.relative_path_pre))?;
    let post = read_gray_png(&root.join(&record.relative_path_post))?;
    let mask = record
        .relative_path_mask
        .as_ref()
        .map(|p| read_gray_png(&root.join(p)).map(|m| m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })))
        .transpose()?;
    let mut pair = SlicePair::new(
        SliceImage::new(pre, BitSource::U8Rescaled)?,
        SliceImage::new(post, BitSource::U8Rescaled)?,
        mask,
        record.patient_id.clone(),
        record.slice_index,
        record.laterality,
    );
    pair.tumor_label = record.tumor_label;
    Ok(pair)
}

/// Loads every pair of one split, in manifest order.
pub fn load_split(manifest_path: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<SlicePair>> {
    let root = manifest_root(manifest_path);
    manifest.records_in(split).map(|r| load_pair(&root, r)).collect()
}

/// Distinct patients of a split, in first-appearance order.
pub fn patients(manifest: &DatasetManifest, split: Split) -> Vec<String> {
    let mut seen = HashSet::new();
    manifest
        .records_in(split)
        .filter(|r| seen.insert(r.patient_id.clone()))
        .map(|r| r.patient_id.clone())
        .collect()
}
