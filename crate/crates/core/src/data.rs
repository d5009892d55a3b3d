//! Domain types shared by every stage: unit-range slices, aligned
//! pre/post pairs with optional tumor masks, and subtraction residuals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Smallest slice edge accepted anywhere in the pipeline.
pub const MIN_SLICE_EDGE: usize = 16;

/// Scale applied to `post − pre` to form the subtraction target.
pub const SUBTRACTION_SCALE: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitSource {
    FloatNative,
    U8Rescaled,
}

/// A unit-range 2-d slice: every pixel in `[0, 1]`, both edges ≥ 16.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pixels: Grid,
    bit_source: BitSource,
}

impl SliceImage {
    pub fn new(pixels: Grid, bit_source: BitSource) -> Result<Self> {
        let (h, w) = pixels.shape();
        if h < MIN_SLICE_EDGE || w < MIN_SLICE_EDGE {
            return Err(Error::InvalidValue(format!(
                "slice is {h}x{w}, both edges must be at least {MIN_SLICE_EDGE}"
            )));
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("slice pixel {bad} outside [0, 1]")));
        }
        Ok(Self { pixels, bit_source })
    }

    pub fn pixels(&self) -> &Grid {
        &self.pixels
    }

    pub fn into_pixels(self) -> Grid {
        self.pixels
    }

    pub fn bit_source(&self) -> BitSource {
        self.bit_source
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Laterality {
    Unilateral,
    Bilateral,
}

/// Aligned pre-contrast / post-contrast slices of one patient.
///
/// Fields are public so that malformed pairs can be represented and
/// reported by [`validate_pair`].
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub pre: SliceImage,
    pub post: SliceImage,
    pub mask: Option<Grid>,
    pub patient_id: String,
    pub slice_index: usize,
    pub tumor_label: bool,
    pub laterality: Laterality,
}

impl SlicePair {
    /// Builds a pair with `tumor_label` derived from the mask.
    pub fn new(
        pre: SliceImage,
        post: SliceImage,
        mask: Option<Grid>,
        patient_id: impl Into<String>,
        slice_index: usize,
        laterality: Laterality,
    ) -> Self {
        let tumor_label = mask.as_ref().is_some_and(mask_has_voxels);
        Self {
            pre,
            post,
            mask,
            patient_id: patient_id.into(),
            slice_index,
            tumor_label,
            laterality,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pre.shape()
    }

    /// Mask as a grid, zeros when absent.
    pub fn mask_or_zeros(&self) -> Grid {
        let (h, w) = self.shape();
        self.mask.clone().unwrap_or_else(|| Grid::zeros(h, w))
    }
}

pub fn mask_has_voxels(mask: &Grid) -> bool {
    mask.data().iter().any(|&v| v != 0.0)
}

/// Invariant violations found by [`validate_pair`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ShapeMismatch(&'static str),
    MaskNotBinary,
    TumorLabelWithoutMaskVoxels,
    MaskVoxelsWithoutTumorLabel,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::ShapeMismatch(what) => write!(f, "shape_mismatch:{what}"),
            Violation::MaskNotBinary => f.write_str("mask_not_binary"),
            Violation::TumorLabelWithoutMaskVoxels => f.write_str("tumor_label_without_mask_voxels"),
            Violation::MaskVoxelsWithoutTumorLabel => f.write_str("mask_voxels_without_tumor_label"),
        }
    }
}

/// Lists every pair invariant that does not hold; empty when the pair is
/// well-formed.
pub fn validate_pair(pair: &SlicePair) -> Vec<Violation> {
    let mut out = Vec::new();
    let shape = pair.pre.shape();
    if pair.post.shape() != shape {
        out.push(Violation::ShapeMismatch("post"));
    }
    let mut has_voxels = false;
    if let Some(mask) = &pair.mask {
        if mask.shape() != shape {
            out.push(Violation::ShapeMismatch("mask"));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            out.push(Violation::MaskNotBinary);
        }
        has_voxels = mask_has_voxels(mask);
    }
    match (pair.tumor_label, has_voxels) {
        (true, false) => out.push(Violation::TumorLabelWithoutMaskVoxels),
        (false, true) => out.push(Violation::MaskVoxelsWithoutTumorLabel),
        _ => {}
    }
    out
}

/// Scaled residual `(post − pre) / 0.5`, bounded by ±2.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtractionImage {
    pixels: Grid,
}

impl SubtractionImage {
    pub fn from_pair(pair: &SlicePair) -> Result<Self> {
        let pixels = pair
            .post
            .pixels()
            .zip_with(pair.pre.pixels(), |post, pre| (post - pre) / SUBTRACTION_SCALE)?;
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Grid {
        &self.pixels
    }

    pub fn into_pixels(self) -> Grid {
        self.pixels
    }

    /// Min-max rescale to `[0, 1]` for display and metric computation.
    pub fn display(&self) -> Grid {
        min_max_rescale(&self.pixels)
    }
}

/// `(g − min)/(max − min)`, all zeros for a constant grid.
pub fn min_max_rescale(g: &Grid) -> Grid {
    let (lo, hi) = g.min_max();
    if hi > lo {
        let span = hi - lo;
        g.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
    } else {
        Grid::zeros(g.height(), g.width())
    }
}
