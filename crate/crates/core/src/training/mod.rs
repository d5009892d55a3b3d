//! Variant registry, target construction and the training loop.

mod checkpoint;
mod generate;
mod optim;
mod trainer;
mod variant;

pub use checkpoint::{Checkpoint, CheckpointHeader, OptimizerMeta, ParamMeta, RngState, CHECKPOINT_VERSION};
pub use generate::{generate, item_seed, Denoiser, Generated};
pub use optim::{ema_update, warmup_decay, AdamW, AdamWConfig};
pub use trainer::{LogRecord, TrainConfig, TrainSummary, Trainer, FINAL_CHECKPOINT, LOSS_LOG};
pub use variant::{registry, Conditioning, FieldOfView, LossKind, NamedVariant, Target, VariantSpec, DEFAULT_EPOCHS};

use crate::autodiff::Tensor;
use crate::data::{SlicePair, SubtractionImage, SUBTRACTION_SCALE};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Stacks `[pre, noisy_target]` or `[pre, noisy_target, mask]` into a
/// `[channels, h, w]` tensor according to the variant's conditioning.
pub fn make_model_input(pre: &Grid, noisy_target: &Grid, mask: Option<&Grid>, variant: &VariantSpec) -> Result<Tensor> {
    pre.ensure_same_shape(noisy_target, "pre vs noisy target")?;
    match (variant.uses_mask_channel(), mask) {
        (true, None) => {
            return Err(Error::ModelInput(format!(
                "variant {variant} is mask-conditioned but the item has no mask"
            )))
        }
        (false, Some(_)) => {
            return Err(Error::ModelInput(format!(
                "variant {variant} takes no mask channel but one was supplied"
            )))
        }
        _ => {}
    }
    let (h, w) = pre.shape();
    let mut data = Vec::with_capacity(variant.in_channels() * h * w);
    data.extend_from_slice(pre.data());
    data.extend_from_slice(noisy_target.data());
    if let Some(m) = mask {
        m.ensure_same_shape(pre, "mask vs pre")?;
        data.extend_from_slice(m.data());
    }
    Ok(Tensor::new(vec![variant.in_channels(), h, w], data))
}

/// PC: the post-contrast image. SUB: `(post − pre)/0.5`.
pub fn make_target(pair: &SlicePair, variant: &VariantSpec) -> Result<Grid> {
    match variant.target {
        Target::Pc => Ok(pair.post.pixels().clone()),
        Target::Sub => Ok(SubtractionImage::from_pair(pair)?.into_pixels()),
    }
}

/// `clamp(0.5·sub + pre, 0, 1)`.
pub fn reconstruct_post(sub_pred: &Grid, pre: &Grid) -> Result<Grid> {
    sub_pred.zip_with(pre, |s, p| (SUBTRACTION_SCALE * s + p).clamp(0.0, 1.0))
}

/// Maps a sampled clean target back to post-contrast space.
pub fn target_to_post(x0: &Grid, pre: &Grid, target: Target) -> Result<Grid> {
    match target {
        Target::Pc => Ok(x0.clone()),
        Target::Sub => reconstruct_post(x0, pre),
    }
}

/// Pairs whose SUB target does not invert back to their post image
/// within `tol`, as `"{patient}_{slice}"` keys.
pub fn audit_subtraction_round_trip(pairs: &[SlicePair], tol: f32) -> Vec<String> {
    let sub = VariantSpec::new(Target::Sub, Conditioning::PreOnly, LossKind::Global, DEFAULT_EPOCHS);
    pairs
        .iter()
        .filter(|p| {
            make_target(p, &sub)
                .and_then(|t| reconstruct_post(&t, p.pre.pixels()))
                .map(|r| r.max_abs_diff(p.post.pixels()) > tol)
                .unwrap_or(true)
        })
        .map(|p| format!("{}_{}", p.patient_id, p.slice_index))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BitSource, Laterality, SliceImage};

    fn pair(pre: f32, post: f32) -> SlicePair {
        let s = |v| SliceImage::new(Grid::filled(16, 16, v), BitSource::FloatNative).unwrap();
        SlicePair::new(s(pre), s(post), None, "p", 0, Laterality::Bilateral)
    }

    fn variant(name: &str) -> VariantSpec {
        name.parse().unwrap()
    }

    #[test]
    fn model_input_channel_contract() {
        let g = Grid::zeros(64, 64);
        let v = make_model_input(&g, &g, None, &variant("PC(Vanilla)")).unwrap();
        assert_eq!(v.shape(), &[2, 64, 64]);
        let m = make_model_input(&g, &g, Some(&g), &variant("PC-ROI(M)")).unwrap();
        assert_eq!(m.shape(), &[3, 64, 64]);
        assert!(make_model_input(&g, &g, None, &variant("PC-ROI(M)")).is_err());
    }

    #[test]
    fn target_examples() {
        let sub = variant("SUB(Vanilla)");
        let p = pair(0.3, 0.3);
        assert!(make_target(&p, &sub).unwrap().data().iter().all(|&v| v == 0.0));
        let p = pair(0.3, 0.4);
        assert!(make_target(&p, &sub)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.2).abs() < 1e-6));
        assert_eq!(make_target(&p, &variant("PC(Vanilla)")).unwrap(), *p.post.pixels());
    }

    #[test]
    fn reconstruction_clamps() {
        let pre = Grid::filled(4, 4, 0.5);
        assert_eq!(reconstruct_post(&Grid::zeros(4, 4), &pre).unwrap(), pre);
        assert!(reconstruct_post(&Grid::filled(4, 4, 2.0), &pre)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    proptest::proptest! {
        #[test]
        fn subtraction_then_reconstruction_is_identity(
            vals in proptest::collection::vec((0.0f32..=1.0, 0.0f32..=1.0), 256),
        ) {
            let pre = Grid::from_fn(16, 16, |y, x| vals[y * 16 + x].0);
            let post = Grid::from_fn(16, 16, |y, x| vals[y * 16 + x].1);
            let pair = SlicePair::new(
                SliceImage::new(pre.clone(), BitSource::FloatNative).unwrap(),
                SliceImage::new(post.clone(), BitSource::FloatNative).unwrap(),
                None,
                "p",
                0,
                Laterality::Unilateral,
            );
            let sub = SubtractionImage::from_pair(&pair).unwrap();
            proptest::prop_assert!(sub.pixels().data().iter().all(|v| v.abs() <= 2.0));
            let back = reconstruct_post(sub.pixels(), &pre).unwrap();
            for (b, p) in back.data().iter().zip(post.data()) {
                proptest::prop_assert!((b - p).abs() <= 1e-6);
            }
        }
    }
}
