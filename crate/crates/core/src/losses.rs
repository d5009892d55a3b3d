//! Image-level and tumor-aware training losses.
//!
//! Every loss is recorded on an autodiff [`Graph`] so the same code path
//! serves training and evaluation; the grid-level functions at the bottom
//! of this module wrap the graph builders for single images.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::grid::Grid;
use crate::perceptual::{grid_tensor, perceptual_var, FeatureExtractor, MIN_FEATURE_INPUT};

pub const ROI_ABSENT: &str = "roi_absent";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageWeights {
    pub mae: f64,
    pub perceptual: f64,
    pub tv: f64,
    pub mse: f64,
}

impl ImageWeights {
    pub const GLOBAL: Self = Self {
        mae: 0.3,
        perceptual: 0.6,
        tv: 0.15,
        mse: 0.05,
    };

    /// Global proportions renormalised to sum to one.
    pub fn roi_default() -> Self {
        let g = Self::GLOBAL;
        let s = g.mae + g.perceptual + g.tv + g.mse;
        Self {
            mae: g.mae / s,
            perceptual: g.perceptual / s,
            tv: g.tv / s,
            mse: g.mse / s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TumorWeights {
    pub global: f64,
    pub roi: f64,
    pub contrast_mae: f64,
    pub intensity: f64,
}

impl Default for TumorWeights {
    fn default() -> Self {
        Self {
            global: 0.3,
            roi: 0.6,
            contrast_mae: 0.05,
            intensity: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub global: ImageWeights,
    pub roi: ImageWeights,
    pub tumor: TumorWeights,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            global: ImageWeights::GLOBAL,
            roi: ImageWeights::roi_default(),
            tumor: TumorWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub raw_value: f64,
    pub weight: f64,
}

/// A weighted sum with its ingredients. `parts` holds nested breakdowns of
/// composite components (for example the global loss inside the tumor loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: BTreeMap<String, LossTerm>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parts: BTreeMap<String, LossBreakdown>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl LossBreakdown {
    fn from_terms(terms: &[(&str, f64, f64)]) -> Self {
        let components: BTreeMap<String, LossTerm> = terms
            .iter()
            .map(|&(name, raw_value, weight)| (name.to_string(), LossTerm { raw_value, weight }))
            .collect();
        let total = components.values().map(|t| t.weight * t.raw_value).sum();
        Self {
            total,
            components,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> BTreeMap<&str, f64> {
        self.components.iter().map(|(k, t)| (k.as_str(), t.weight)).collect()
    }

    pub fn raw(&self, name: &str) -> Option<f64> {
        self.components.get(name).map(|t| t.raw_value)
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    /// `|total − Σ weight·raw|`, recursively maximised over nested parts.
    pub fn consistency_error(&self) -> f64 {
        let own: f64 = self.components.values().map(|t| t.weight * t.raw_value).sum();
        let nested = self.parts.values().map(Self::consistency_error).fold(0.0, f64::max);
        (self.total - own).abs().max(nested)
    }
}

fn value(g: &Graph, v: Var) -> f64 {
    g.scalar(v) as f64
}

fn plane_tensor(data: &[f32], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![1, 1, h, w], data.to_vec())
}

/// `0.3·MAE + 0.6·Perceptual + 0.15·TV(pred) + 0.05·MSE` over a batch
/// `pred, target: [n, 1, h, w]`.
pub fn image_loss_var(
    g: &mut Graph,
    ext: &dyn FeatureExtractor,
    w: &ImageWeights,
    pred: Var,
    target: Var,
) -> (Var, LossBreakdown) {
    let diff = g.sub(pred, target);
    let ad = g.abs(diff);
    let mae = g.mean(ad);
    let sq = g.square(diff);
    let mse = g.mean(sq);
    let tv = g.total_variation(pred, None);
    let perc = perceptual_var(g, ext, pred, target);
    let total = g.weighted_sum(&[
        (mae, w.mae as f32),
        (perc, w.perceptual as f32),
        (tv, w.tv as f32),
        (mse, w.mse as f32),
    ]);
    let breakdown = LossBreakdown::from_terms(&[
        ("mae", value(g, mae), w.mae),
        ("perceptual", value(g, perc), w.perceptual),
        ("tv", value(g, tv), w.tv),
        ("mse", value(g, mse), w.mse),
    ]);
    (total, breakdown)
}

/// Tight bounding box `(y0, x0, h, w)` of the nonzero mask pixels.
pub fn mask_bbox(mask: &Grid) -> Option<(usize, usize, usize, usize)> {
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) != 0.0 {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    (y0 != usize::MAX).then(|| (y0, x0, y1 - y0 + 1, x1 - x0 + 1))
}

/// Per-item ROI-family terms, recorded for one `[1, 1, h, w]` item.
struct RoiTerms {
    roi: Var,
    roi_parts: [Var; 4],
    contrast: Var,
    intensity: Var,
}

fn roi_terms_item(
    g: &mut Graph,
    ext: &dyn FeatureExtractor,
    w: &ImageWeights,
    pred: Var,
    target: Var,
    pre: &Grid,
    mask: &Grid,
) -> Option<RoiTerms> {
    let bbox = mask_bbox(mask)?;
    let (h, wd) = mask.shape();
    let count: f64 = mask.data().iter().map(|&m| m as f64).sum();
    let inv = (1.0 / count) as f32;
    let m = g.constant(plane_tensor(mask.data(), h, wd));

    let diff = g.sub(pred, target);
    let ad = g.abs(diff);
    let adm = g.mul(ad, m);
    let s = g.sum(adm);
    let mae = g.scale(s, inv);
    let sq = g.square(diff);
    let sqm = g.mul(sq, m);
    let s = g.sum(sqm);
    let mse = g.scale(s, inv);
    let tv = g.total_variation(pred, Some(mask.data()));
    let (y0, x0, bh, bw) = bbox;
    let crop_p = g.crop(pred, y0, x0, bh, bw);
    let crop_p = g.resize(crop_p, MIN_FEATURE_INPUT, MIN_FEATURE_INPUT);
    let crop_t = g.crop(target, y0, x0, bh, bw);
    let crop_t = g.resize(crop_t, MIN_FEATURE_INPUT, MIN_FEATURE_INPUT);
    let perc = perceptual_var(g, ext, crop_p, crop_t);
    let roi = g.weighted_sum(&[
        (mae, w.mae as f32),
        (perc, w.perceptual as f32),
        (tv, w.tv as f32),
        (mse, w.mse as f32),
    ]);

    // Contrast MAE on masked images: ReLU keeps only enhancement above pre.
    let pm = g.mul(pred, m);
    let tm = g.mul(target, m);
    let pre_m = g.constant(plane_tensor(
        &pre.zip_with(mask, |a, b| a * b).expect("shapes checked").into_data(),
        h,
        wd,
    ));
    let rp = g.sub(pm, pre_m);
    let rp = g.relu(rp);
    let rt = g.sub(tm, pre_m);
    let rt = g.relu(rt);
    let dr = g.sub(rp, rt);
    let dr = g.abs(dr);
    let dr = g.mul(dr, m);
    let s = g.sum(dr);
    let contrast = g.scale(s, inv);

    let sp = g.sum(pm);
    let st = g.sum(tm);
    let dm = g.sub(sp, st);
    let dm = g.scale(dm, inv);
    let intensity = g.abs(dm);

    Some(RoiTerms {
        roi,
        roi_parts: [mae, perc, tv, mse],
        contrast,
        intensity,
    })
}

/// Tumor-aware objective over a batch:
/// `0.3·L_global + 0.6·L_ROI + 0.05·L_MAEcontrast + 0.05·L_intensity`.
///
/// ROI-family terms are averaged over the items whose mask is non-empty;
/// when none is, they are zero and the breakdown carries `roi_absent`.
pub fn tumor_loss_var(
    g: &mut Graph,
    ext: &dyn FeatureExtractor,
    weights: &LossWeights,
    pred: Var,
    target: Var,
    pre: &[Grid],
    masks: &[Grid],
) -> (Var, LossBreakdown) {
    let (global, global_bd) = image_loss_var(g, ext, &weights.global, pred, target);
    let n = g.shape(pred)[0];
    assert_eq!(pre.len(), n, "one pre image per item");
    assert_eq!(masks.len(), n, "one mask per item");
    let mut items = Vec::new();
    for i in 0..n {
        let p = g.slice_batch(pred, i);
        let t = g.slice_batch(target, i);
        if let Some(terms) = roi_terms_item(g, ext, &weights.roi, p, t, &pre[i], &masks[i]) {
            items.push(terms);
        }
    }
    let tw = weights.tumor;
    let mut roi_bd;
    let mut flags = Vec::new();
    let (roi, contrast, intensity) = if items.is_empty() {
        flags.push(ROI_ABSENT.to_string());
        let zero = g.constant(Tensor::scalar(0.0));
        roi_bd = LossBreakdown::from_terms(&[
            ("mae", 0.0, weights.roi.mae),
            ("perceptual", 0.0, weights.roi.perceptual),
            ("tv", 0.0, weights.roi.tv),
            ("mse", 0.0, weights.roi.mse),
        ]);
        (zero, zero, zero)
    } else {
        let k = 1.0 / items.len() as f32;
        let avg = |g: &mut Graph, f: &dyn Fn(&RoiTerms) -> Var| {
            let terms: Vec<(Var, f32)> = items.iter().map(|it| (f(it), k)).collect();
            g.weighted_sum(&terms)
        };
        let roi = avg(g, &|it| it.roi);
        let parts: Vec<Var> = (0..4).map(|j| avg(g, &|it| it.roi_parts[j])).collect();
        roi_bd = LossBreakdown::from_terms(&[
            ("mae", value(g, parts[0]), weights.roi.mae),
            ("perceptual", value(g, parts[1]), weights.roi.perceptual),
            ("tv", value(g, parts[2]), weights.roi.tv),
            ("mse", value(g, parts[3]), weights.roi.mse),
        ]);
        (roi, avg(g, &|it| it.contrast), avg(g, &|it| it.intensity))
    };
    roi_bd.flags = flags.clone();
    let total = g.weighted_sum(&[
        (global, tw.global as f32),
        (roi, tw.roi as f32),
        (contrast, tw.contrast_mae as f32),
        (intensity, tw.intensity as f32),
    ]);
    let mut bd = LossBreakdown::from_terms(&[
        ("global", global_bd.total, tw.global),
        ("roi", roi_bd.total, tw.roi),
        ("contrast_mae", value(g, contrast), tw.contrast_mae),
        ("intensity", value(g, intensity), tw.intensity),
    ]);
    bd.parts.insert("global".into(), global_bd);
    bd.parts.insert("roi".into(), roi_bd);
    bd.flags = flags;
    (total, bd)
}

// Grid-level wrappers.

/// Anisotropic TV: mean absolute difference over all horizontal and
/// vertical neighbour pairs.
pub fn total_variation(img: &Grid) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(grid_tensor(img));
    let tv = g.total_variation(x, None);
    value(&g, tv)
}

fn pair_vars(g: &mut Graph, pred: &Grid, target: &Grid) -> Result<(Var, Var)> {
    pred.ensure_same_shape(target, "pred vs target")?;
    Ok((g.constant(grid_tensor(pred)), g.constant(grid_tensor(target))))
}

pub fn global_loss(ext: &dyn FeatureExtractor, pred: &Grid, target: &Grid) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let (p, t) = pair_vars(&mut g, pred, target)?;
    Ok(image_loss_var(&mut g, ext, &ImageWeights::GLOBAL, p, t).1)
}

/// ROI composite for one image; the breakdown carries `roi_absent` and a
/// zero total when the mask is empty.
pub fn roi_loss(ext: &dyn FeatureExtractor, pred: &Grid, target: &Grid, mask: &Grid) -> Result<LossBreakdown> {
    Ok(
        tumor_total_loss(ext, pred, target, &Grid::zeros(pred.height(), pred.width()), mask)?
            .parts
            .remove("roi")
            .expect("roi part always present"),
    )
}

/// `(value, roi_absent)` of the ReLU-masked contrast MAE.
pub fn contrast_mae(pred: &Grid, target: &Grid, pre: &Grid, mask: &Grid) -> Result<(f64, bool)> {
    let bd = tumor_total_loss(&NullExtractor, pred, target, pre, mask)?;
    Ok((bd.raw("contrast_mae").unwrap_or(0.0), bd.has_flag(ROI_ABSENT)))
}

/// `(|μ_M(pred) − μ_M(target)|, roi_absent)`.
pub fn intensity_loss(pred: &Grid, target: &Grid, mask: &Grid) -> Result<(f64, bool)> {
    let zeros = Grid::zeros(pred.height(), pred.width());
    let bd = tumor_total_loss(&NullExtractor, pred, target, &zeros, mask)?;
    Ok((bd.raw("intensity").unwrap_or(0.0), bd.has_flag(ROI_ABSENT)))
}

pub fn tumor_total_loss(
    ext: &dyn FeatureExtractor,
    pred: &Grid,
    target: &Grid,
    pre: &Grid,
    mask: &Grid,
) -> Result<LossBreakdown> {
    pred.ensure_same_shape(pre, "pred vs pre")?;
    pred.ensure_same_shape(mask, "pred vs mask")?;
    let mut g = Graph::new();
    let (p, t) = pair_vars(&mut g, pred, target)?;
    let pre = std::slice::from_ref(pre);
    let mask = std::slice::from_ref(mask);
    Ok(tumor_loss_var(&mut g, ext, &LossWeights::default(), p, t, pre, mask).1)
}

/// Extractor without features, for terms that never touch the perceptual
/// path. Its perceptual distance is identically zero.
struct NullExtractor;

impl FeatureExtractor for NullExtractor {
    fn name(&self) -> &str {
        "null"
    }

    fn features(&self, _g: &mut Graph, _x: Var) -> Vec<Var> {
        Vec::new()
    }
}
