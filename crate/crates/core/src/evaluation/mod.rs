//! Paired and distributional metrics, ROI views and evaluation reports.

mod frechet;
mod metrics;
mod radiomics;
mod report;

pub use frechet::{frechet_between, frechet_distance, Moments};
pub use metrics::{mae, mse, paired_metrics, psnr, psnr_from_mse, ssim, ssim_window_for, MeanStd, PairedMetrics};
pub use radiomics::{glcm, glcm_features, radiomics_features, ZScore, FEATURE_NAMES, MIN_REGION_PIXELS};
pub use report::{
    evaluate_rows, evaluate_run, EvalItem, EvalReport, EvalRow, GenerationMeta, MetricSet, Mode, PerImage,
    GENERATION_META, REAL_PRE_VS_REAL_PC, REAL_PRE_VS_REAL_SUB,
};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::perceptual::FeatureExtractor;

pub const ROI_MARGIN: usize = 4;
/// Edge length ROI crops are resized to before feature extraction.
pub const ROI_FEATURE_SIZE: usize = 64;

/// Bounding box `(y0, x0, h, w)` of the nonzero mask pixels dilated by
/// `margin` and clipped to the image. `None` for an empty mask.
pub fn roi_box(mask: &Grid, margin: usize) -> Option<(usize, usize, usize, usize)> {
    let (y0, x0, h, w) = crate::losses::mask_bbox(mask)?;
    let top = y0.saturating_sub(margin);
    let left = x0.saturating_sub(margin);
    let bottom = (y0 + h + margin).min(mask.height());
    let right = (x0 + w + margin).min(mask.width());
    Some((top, left, bottom - top, right - left))
}

/// Crops `img` to [`roi_box`] of `mask`.
pub fn roi_view(img: &Grid, mask: &Grid, margin: usize) -> Result<Option<Grid>> {
    img.ensure_same_shape(mask, "roi image vs mask")?;
    roi_box(mask, margin)
        .map(|(y, x, h, w)| img.crop(y, x, h, w))
        .transpose()
}

/// Pooled feature vector per image for FID.
pub fn embed_for_fid(ext: &dyn FeatureExtractor, images: &[Grid]) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Err(Error::InvalidValue("no images to embed".into()));
    }
    Ok(images.iter().map(|img| ext.embed(img)).collect())
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"` and
/// `"nan"` so reports stay valid JSON and round-trip exactly.
pub(crate) mod nonfinite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("unexpected float text {other:?}"))),
            },
        }
    }
}
