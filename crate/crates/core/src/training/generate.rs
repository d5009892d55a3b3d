use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::target_to_post;
use super::variant::VariantSpec;
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::backbone::{ConditionBundle, UNet};
use crate::data::SlicePair;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::schedule::{sample_batch, DiffusionSchedule, SamplerConfig, X0Predictor};

/// A trained network bound to its weights, evaluated as a batched x̂₀
/// predictor.
pub struct Denoiser {
    pub net: UNet,
    pub store: ParamStore,
}

impl Denoiser {
    pub fn new(net: UNet, store: ParamStore) -> Self {
        Self { net, store }
    }

    /// Loads the EMA weights of a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (net, store) = ckpt.model(true)?;
        Ok(Self { net, store })
    }
}

impl X0Predictor for Denoiser {
    fn predict_batch(&self, x_t: &[Grid], conds: &[ConditionBundle], t: usize) -> Result<Vec<Grid>> {
        let Some(first) = x_t.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = first.shape();
        let c = self.net.config().in_channels;
        let mut data = Vec::with_capacity(x_t.len() * c * h * w);
        for (x, cond) in x_t.iter().zip(conds) {
            data.extend_from_slice(self.net.stack_input(x, cond)?.data());
        }
        let mut g = Graph::new();
        let input = g.constant(Tensor::new(vec![x_t.len(), c, h, w], data));
        let out = self.net.forward(&mut g, &self.store, input, &vec![t; x_t.len()])?;
        g.value(out)
            .data()
            .chunks_exact(h * w)
            .map(|chunk| Grid::new(h, w, chunk.to_vec()))
            .collect()
    }
}

/// Per-item sampling seed: the first eight bytes of
/// `sha256(seed_le ‖ patient ‖ 0x00 ‖ slice_le)`.
pub fn item_seed(seed: u64, patient: &str, slice: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(patient.as_bytes());
    h.update([0u8]);
    h.update((slice as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes"))
}

/// One synthesized item in post-contrast space, plus the raw clean-target
/// sample (equal to `post` for PC variants).
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub patient_id: String,
    pub slice_index: usize,
    pub target: Grid,
    pub post: Grid,
}

/// Samples every pair in chunks of `batch_size`. Results depend only on
/// the model, `seed` and each item's identity, not on the batching.
pub fn generate(
    model: &dyn X0Predictor,
    variant: &VariantSpec,
    pairs: &[SlicePair],
    sched: &DiffusionSchedule,
    steps: usize,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<Generated>> {
    if batch_size == 0 {
        return Err(Error::InvalidValue("sampling batch size must be ≥ 1".into()));
    }
    let cfg = SamplerConfig::new(steps, variant.target.clamp_range());
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size) {
        let conds = chunk
            .iter()
            .map(|p| {
                let mask = if variant.uses_mask_channel() {
                    Some(p.mask.clone().ok_or_else(|| {
                        Error::ModelInput(format!(
                            "variant {variant} needs a mask but {}_{} has none",
                            p.patient_id, p.slice_index
                        ))
                    })?)
                } else {
                    None
                };
                Ok(ConditionBundle::new(p.pre.pixels().clone(), mask))
            })
            .collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = chunk
            .iter()
            .map(|p| item_seed(seed, &p.patient_id, p.slice_index))
            .collect();
        let samples = sample_batch(model, &conds, sched, &seeds, &cfg)?;
        for (p, x0) in chunk.iter().zip(samples) {
            out.push(Generated {
                patient_id: p.patient_id.clone(),
                slice_index: p.slice_index,
                post: target_to_post(&x0, p.pre.pixels(), variant.target)?,
                target: x0,
            });
        }
    }
    Ok(out)
}
