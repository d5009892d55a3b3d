//! WebAssembly bindings behind `www/index.html`.
//!
//! The page offers three tools over one phantom slice:
//!
//! * a phantom explorer (pre, post, subtraction and lesion mask),
//! * a forward-noising explorer showing `x_t` for either training target,
//! * a metric and loss playground that degrades the post image and reports
//!   the evaluation metrics and both training objectives.
//!
//! All computation lives in [`Slice`] and plain functions so the logic is
//! testable on the host; the `#[wasm_bindgen]` layer only converts errors.

use dcesynth::backbone::ConditionBundle;
use dcesynth::data::{min_max_rescale, Laterality, SlicePair};
use dcesynth::evaluation::{mae, paired_metrics, psnr, roi_view, ssim, ROI_MARGIN};
use dcesynth::grid::Grid;
use dcesynth::losses::{global_loss, tumor_total_loss, LossBreakdown};
use dcesynth::perceptual::FallbackExtractor;
use dcesynth::phantom::{generate_case, PhantomParams};
use dcesynth::preprocess::normalize_slice;
use dcesynth::schedule::{make_cosine_schedule, q_sample, sample, SamplerConfig};
use dcesynth::training::{make_target, target_to_post, Target, VariantSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const T_MAX: usize = 1000;
const COSINE_S: f64 = 0.008;
const DEPTH: usize = 8;

/// One tumor-bearing phantom slice, normalised like the preprocessing step.
pub struct Slice {
    pair: SlicePair,
    mask: Grid,
}

impl Slice {
    /// Picks the slice with the most lesion voxels from a fresh phantom.
    pub fn generate(seed: u64, size: usize, lesions: usize, bilateral: bool) -> dcesynth::error::Result<Self> {
        let case = generate_case(&PhantomParams {
            image_size: size,
            depth: DEPTH,
            n_lesions: lesions,
            laterality: if bilateral {
                Laterality::Bilateral
            } else {
                Laterality::Unilateral
            },
            seed,
            ..PhantomParams::default()
        })?;
        let count = |z: usize| case.mask_volume.slice(z).data().iter().filter(|&&v| v > 0.0).count();
        let z = (0..DEPTH).max_by_key(|&z| (count(z), usize::MAX - z)).unwrap_or(0);
        let mask = case.mask_volume.slice(z);
        let pair = SlicePair::new(
            normalize_slice(&case.pre_volume.slice(z))?,
            normalize_slice(&case.post_volume.slice(z))?,
            Some(mask.clone()),
            case.patient_id.clone(),
            z,
            case.laterality,
        );
        Ok(Self { pair, mask })
    }

    pub fn size(&self) -> usize {
        self.mask.width()
    }

    pub fn pre(&self) -> &Grid {
        self.pair.pre.pixels()
    }

    pub fn post(&self) -> &Grid {
        self.pair.post.pixels()
    }

    pub fn mask(&self) -> &Grid {
        &self.mask
    }

    /// `post − pre`, rescaled to `[0, 1]` for display.
    pub fn subtraction(&self) -> Grid {
        let raw = self.post().zip_with(self.pre(), |a, b| a - b).expect("same shape");
        min_max_rescale(&raw)
    }

    fn variant(target: Target) -> VariantSpec {
        let name = match target {
            Target::Pc => "PC(Vanilla)",
            Target::Sub => "SUB(Vanilla)",
        };
        name.parse().expect("registry name")
    }

    /// Forward-noised training target at timestep `t`.
    pub fn noised(&self, target: Target, t: usize, seed: u64) -> dcesynth::error::Result<Grid> {
        let sched = make_cosine_schedule(T_MAX, COSINE_S)?;
        let x0 = make_target(&self.pair, &Self::variant(target))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = Grid::from_fn(x0.height(), x0.width(), |_, _| StandardNormal.sample(&mut rng));
        Ok(q_sample(&x0, t, &eps, &sched)?.x_t)
    }

    /// Runs the sampler with a model that always answers with the true
    /// target, then maps the result back to post-contrast space.
    pub fn oracle_sample(&self, target: Target, steps: usize, seed: u64) -> dcesynth::error::Result<Grid> {
        let sched = make_cosine_schedule(T_MAX, COSINE_S)?;
        let x0 = make_target(&self.pair, &Self::variant(target))?;
        let model = |_: &Grid, _: &ConditionBundle, _: usize| Ok(x0.clone());
        let cond = ConditionBundle::new(self.pre().clone(), None);
        let out = sample(
            &model,
            &cond,
            &sched,
            seed,
            &SamplerConfig::new(steps, target.clamp_range()),
        )?;
        target_to_post(&out, self.pre(), target)
    }

    /// Post image with Gaussian noise everywhere and the lesion enhancement
    /// scaled by `uptake` (1 keeps it, 0 removes it).
    pub fn degraded(&self, noise_sigma: f32, uptake: f32, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
        let (pre, post, mask) = (self.pre().data(), self.post().data(), self.mask.data());
        let (h, w) = self.mask.shape();
        Grid::from_fn(h, w, |y, x| {
            let i = y * w + x;
            let base = if mask[i] > 0.0 {
                pre[i] + uptake * (post[i] - pre[i])
            } else {
                post[i]
            };
            (base + normal.sample(&mut rng)).clamp(0.0, 1.0)
        })
    }

    pub fn scores(&self, pred: &Grid) -> dcesynth::error::Result<Scores> {
        let ext = FallbackExtractor::new();
        let real = self.post();
        let roi_mae = match (
            roi_view(pred, &self.mask, ROI_MARGIN)?,
            roi_view(real, &self.mask, ROI_MARGIN)?,
        ) {
            (Some(a), Some(b)) => Some(mae(&a, &b)?),
            _ => None,
        };
        Ok(Scores {
            mae: mae(pred, real)?,
            ssim: ssim(pred, real)?,
            psnr: finite_or_none(psnr(pred, real)?),
            lpips: paired_metrics(&ext, pred, real)?.lpips,
            roi_mae,
            global_loss: global_loss(&ext, pred, real)?,
            tumor_loss: tumor_total_loss(&ext, pred, real, self.pre(), &self.mask)?,
        })
    }
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Everything the metric playground displays. PSNR is `None` for a
/// perfect reconstruction.
#[derive(Debug, Serialize)]
pub struct Scores {
    pub mae: f64,
    pub ssim: f64,
    pub psnr: Option<f64>,
    pub lpips: f64,
    pub roi_mae: Option<f64>,
    pub global_loss: LossBreakdown,
    pub tumor_loss: LossBreakdown,
}

/// Grayscale `[0, 1]` grid to RGBA bytes for `ImageData`.
pub fn gray_rgba(g: &Grid) -> Vec<u8> {
    g.data()
        .iter()
        .flat_map(|&v| {
            let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [b, b, b, 255]
        })
        .collect()
}

/// Grayscale background with mask pixels tinted red.
pub fn overlay_rgba(g: &Grid, mask: &Grid) -> Vec<u8> {
    g.data()
        .iter()
        .zip(mask.data())
        .flat_map(|(&v, &m)| {
            let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            if m > 0.0 {
                [b / 2 + 127, b / 2, b / 2, 255]
            } else {
                [b, b, b, 255]
            }
        })
        .collect()
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_target(name: &str) -> Result<Target, JsError> {
    match name {
        "pc" => Ok(Target::Pc),
        "sub" => Ok(Target::Sub),
        other => Err(JsError::new(&format!(
            "unknown target {other:?}, expected \"pc\" or \"sub\""
        ))),
    }
}

/// `ᾱ_t` of the demo schedule.
#[wasm_bindgen(js_name = alphaBar)]
pub fn alpha_bar(t: usize) -> Result<f64, JsError> {
    let sched = make_cosine_schedule(T_MAX, COSINE_S).map_err(js_err)?;
    if t > T_MAX {
        return Err(JsError::new(&format!("t must be at most {T_MAX}")));
    }
    Ok(sched.alpha_bar(t))
}

#[wasm_bindgen(js_name = Phantom)]
pub struct JsPhantom(Slice);

#[wasm_bindgen(js_class = Phantom)]
impl JsPhantom {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, lesions: usize, bilateral: bool) -> Result<JsPhantom, JsError> {
        Slice::generate(seed, size, lesions, bilateral)
            .map(JsPhantom)
            .map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.0.size()
    }

    #[wasm_bindgen(js_name = preRgba)]
    pub fn pre_rgba(&self) -> Vec<u8> {
        gray_rgba(self.0.pre())
    }

    #[wasm_bindgen(js_name = postRgba)]
    pub fn post_rgba(&self) -> Vec<u8> {
        gray_rgba(self.0.post())
    }

    #[wasm_bindgen(js_name = subtractionRgba)]
    pub fn subtraction_rgba(&self) -> Vec<u8> {
        gray_rgba(&self.0.subtraction())
    }

    #[wasm_bindgen(js_name = maskRgba)]
    pub fn mask_rgba(&self) -> Vec<u8> {
        overlay_rgba(self.0.post(), self.0.mask())
    }

    /// `x_t` of the `"pc"` or `"sub"` target, min-max scaled for display.
    #[wasm_bindgen(js_name = noisedRgba)]
    pub fn noised_rgba(&self, target: &str, t: usize, seed: u64) -> Result<Vec<u8>, JsError> {
        let x = self.0.noised(parse_target(target)?, t, seed).map_err(js_err)?;
        Ok(gray_rgba(&min_max_rescale(&x)))
    }

    #[wasm_bindgen(js_name = oracleSampleRgba)]
    pub fn oracle_sample_rgba(&self, target: &str, steps: usize, seed: u64) -> Result<Vec<u8>, JsError> {
        let x = self
            .0
            .oracle_sample(parse_target(target)?, steps, seed)
            .map_err(js_err)?;
        Ok(gray_rgba(&x))
    }

    #[wasm_bindgen(js_name = degradedRgba)]
    pub fn degraded_rgba(&self, noise_sigma: f32, uptake: f32, seed: u64) -> Vec<u8> {
        gray_rgba(&self.0.degraded(noise_sigma, uptake, seed))
    }

    /// JSON-encoded [`Scores`] of the degraded image against the real post.
    #[wasm_bindgen(js_name = scoreDegraded)]
    pub fn score_degraded(&self, noise_sigma: f32, uptake: f32, seed: u64) -> Result<String, JsError> {
        let pred = self.0.degraded(noise_sigma, uptake, seed);
        let scores = self.0.scores(&pred).map_err(js_err)?;
        serde_json::to_string(&scores).map_err(js_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice() -> Slice {
        Slice::generate(3, 32, 1, true).unwrap()
    }

    #[test]
    fn picked_slice_holds_a_lesion() {
        let s = slice();
        assert_eq!(s.size(), 32);
        assert!(s.mask().data().iter().any(|&v| v > 0.0));
        let (lo, hi) = s.post().min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
        assert_eq!(gray_rgba(s.pre()).len(), 32 * 32 * 4);
    }

    #[test]
    fn noising_endpoints() {
        let s = slice();
        let x = s.noised(Target::Pc, 1, 1).unwrap();
        assert!(mae(&x, s.post()).unwrap() < 0.01);
        let late = s.noised(Target::Sub, T_MAX, 1).unwrap();
        let corr: f64 = late
            .data()
            .iter()
            .zip(s.subtraction().data())
            .map(|(a, b)| (*a * *b) as f64)
            .sum();
        assert!(corr.abs() / (32.0 * 32.0) < 0.1);
        assert!(alpha_bar(0).unwrap() > 0.999_999);
    }

    #[test]
    fn oracle_sampling_recovers_post() {
        let s = slice();
        for target in [Target::Pc, Target::Sub] {
            let out = s.oracle_sample(target, 20, 4).unwrap();
            assert!(mae(&out, s.post()).unwrap() < 1e-5);
        }
    }

    #[test]
    fn degradation_moves_metrics_the_right_way() {
        let s = slice();
        let perfect = s.scores(&s.degraded(0.0, 1.0, 0)).unwrap();
        assert_eq!(perfect.mae, 0.0);
        assert_eq!(perfect.psnr, None);
        // Only the smoothness prior on the prediction itself remains.
        let tv = perfect.global_loss.raw("tv").unwrap();
        assert!((perfect.global_loss.total - 0.15 * tv).abs() < 1e-9);
        let no_uptake = s.scores(&s.degraded(0.0, 0.0, 0)).unwrap();
        assert!(no_uptake.roi_mae.unwrap() > no_uptake.mae);
        assert!(no_uptake.tumor_loss.raw("intensity").unwrap() > 0.0);
        let noisy = s.scores(&s.degraded(0.1, 1.0, 0)).unwrap();
        assert!(noisy.ssim < 0.9 && noisy.psnr.unwrap() < 30.0);
        let json = serde_json::to_value(&noisy).unwrap();
        assert_eq!(json["global_loss"]["components"]["perceptual"]["weight"], 0.6);
    }
}
