use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointHeader, OptimizerMeta, ParamMeta, RngState};
use super::optim::{ema_update, warmup_decay, AdamW, AdamWConfig};
use super::variant::{LossKind, NamedVariant, Target, VariantSpec};
use super::{make_model_input, make_target};
use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::backbone::{ModelConfig, UNet};
use crate::data::{validate_pair, SlicePair, SUBTRACTION_SCALE};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::{image_loss_var, tumor_loss_var, LossBreakdown, LossWeights};
use crate::perceptual::FeatureExtractor;
use crate::schedule::{q_sample, DiffusionConfig, DiffusionSchedule};

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.cdck";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Explicit step budget; overrides the epoch-derived count.
    #[serde(default)]
    pub steps: Option<u64>,
    /// Overrides the variant's epoch count.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_ema")]
    pub ema_lambda: f64,
    /// Ramp the EMA decay as `min(λ, (1+k)/(10+k))` over early steps.
    #[serde(default = "default_true")]
    pub ema_warmup: bool,
    /// Taken from the experiment seed rather than the `[train]` table.
    #[serde(skip)]
    pub seed: u64,
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

fn default_batch() -> usize {
    4
}
fn default_ema() -> f64 {
    0.999
}
fn default_true() -> bool {
    true
}
fn default_ckpt_every() -> u64 {
    500
}
fn default_log_every() -> u64 {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            steps: None,
            epochs: None,
            optimizer: AdamWConfig::default(),
            ema_lambda: default_ema(),
            ema_warmup: true,
            seed: 0,
            checkpoint_every: default_ckpt_every(),
            log_every: default_log_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        if !(self.ema_lambda > 0.0 && self.ema_lambda < 1.0) {
            return Err(Error::Config(format!("ema_lambda {} outside (0, 1)", self.ema_lambda)));
        }
        if !self.optimizer.lr.is_finite() || self.optimizer.lr <= 0.0 {
            return Err(Error::Config("optimizer lr must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// One line of the JSON-lines loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl LogRecord {
    fn from_breakdown(step: u64, bd: &LossBreakdown) -> Self {
        let mut components = BTreeMap::new();
        for (k, t) in &bd.components {
            components.insert(k.clone(), t.raw_value);
        }
        for (part, sub) in &bd.parts {
            for (k, t) in &sub.components {
                components.insert(format!("{part}.{k}"), t.raw_value);
            }
        }
        Self {
            step,
            total: bd.total,
            components,
            flags: bd.flags.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: String,
    pub steps: u64,
    pub first_loss: f64,
    pub last_loss: f64,
}

/// Owns the model, EMA copy, optimizer and RNG for one variant.
pub struct Trainer<'a> {
    variant: VariantSpec,
    net: UNet,
    store: ParamStore,
    ema: Vec<Tensor>,
    opt: AdamW,
    diffusion: DiffusionConfig,
    sched: DiffusionSchedule,
    ext: &'a dyn FeatureExtractor,
    weights: LossWeights,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        variant: VariantSpec,
        model: &ModelConfig,
        diffusion: DiffusionConfig,
        cfg: TrainConfig,
        weights: LossWeights,
        ext: &'a dyn FeatureExtractor,
    ) -> Result<Self> {
        cfg.validate()?;
        let (net, store) = UNet::new(variant.model_config(model), cfg.seed)?;
        let ema = store.values().to_vec();
        let opt = AdamW::new(cfg.optimizer, store.values());
        Ok(Self {
            variant,
            net,
            ema,
            opt,
            sched: DiffusionSchedule::from_config(&diffusion)?,
            diffusion,
            ext,
            weights,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_0000),
            cfg,
            store,
            step: 0,
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Restores the full training state saved by [`Trainer::checkpoint`].
    pub fn resume(
        ckpt: &Checkpoint,
        cfg: TrainConfig,
        weights: LossWeights,
        ext: &'a dyn FeatureExtractor,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = &ckpt.header;
        let (Some(opt_meta), Some(rng)) = (&h.optimizer, &h.rng) else {
            return Err(Error::Config(
                "checkpoint lacks optimizer or RNG state; it cannot be resumed".into(),
            ));
        };
        let (net, store) = ckpt.model(false)?;
        let opt = AdamW {
            config: opt_meta.config,
            m: ckpt.adam_m.clone(),
            v: ckpt.adam_v.clone(),
            t: opt_meta.t,
        };
        Ok(Self {
            variant: h.variant.0,
            net,
            store,
            ema: ckpt.ema.clone(),
            opt,
            sched: DiffusionSchedule::from_config(&h.diffusion)?,
            diffusion: h.diffusion,
            ext,
            weights,
            cfg,
            rng: rng.restore()?,
            step: h.step,
            order: h.data_order.clone(),
            cursor: h.cursor,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .store
            .names()
            .iter()
            .zip(self.store.values())
            .map(|(name, t)| ParamMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                variant: NamedVariant(self.variant),
                model: self.net.config().clone(),
                diffusion: self.diffusion,
                step: self.step,
                ema_lambda: self.cfg.ema_lambda,
                params,
                optimizer: Some(OptimizerMeta {
                    config: self.opt.config,
                    t: self.opt.t,
                }),
                rng: Some(RngState::capture(&self.rng)),
                data_order: self.order.clone(),
                cursor: self.cursor,
            },
            weights: self.store.values().to_vec(),
            ema: self.ema.clone(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        }
    }

    pub fn variant(&self) -> VariantSpec {
        self.variant
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn ema(&self) -> &[Tensor] {
        &self.ema
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    /// Steps for `n` training pairs: the explicit budget if set, else
    /// `epochs · ceil(n / batch)`.
    pub fn total_steps(&self, n: usize) -> u64 {
        self.cfg.steps.unwrap_or_else(|| {
            let epochs = self.cfg.epochs.unwrap_or(self.variant.epochs) as u64;
            epochs * n.div_ceil(self.cfg.batch_size) as u64
        })
    }

    fn check_batch(&self, batch: &[SlicePair]) -> Result<()> {
        let first = batch
            .first()
            .ok_or_else(|| Error::InvalidValue("empty training batch".into()))?;
        for p in batch {
            let v = validate_pair(p);
            if !v.is_empty() {
                let list: Vec<String> = v.iter().map(ToString::to_string).collect();
                return Err(Error::InvalidValue(format!(
                    "pair {}_{} is invalid: {}",
                    p.patient_id,
                    p.slice_index,
                    list.join(", ")
                )));
            }
            if p.shape() != first.shape() {
                return Err(Error::Shape("all pairs in a batch must share a shape".into()));
            }
            if self.variant.uses_mask_channel() && p.mask.is_none() {
                return Err(Error::ModelInput(format!(
                    "variant {} is mask-conditioned but pair {}_{} has no mask",
                    self.variant, p.patient_id, p.slice_index
                )));
            }
        }
        Ok(())
    }

    /// One optimizer update and one EMA update on `batch`.
    pub fn train_step(&mut self, batch: &[SlicePair]) -> Result<LossBreakdown> {
        self.check_batch(batch)?;
        let (h, w) = batch[0].shape();
        let n = batch.len();
        let t_max = self.sched.t_max();
        let mut ts = Vec::with_capacity(n);
        let mut input = Vec::with_capacity(n * self.variant.in_channels() * h * w);
        let mut pre_data = Vec::with_capacity(n * h * w);
        let mut post_data = Vec::with_capacity(n * h * w);
        for p in batch {
            let t = self.rng.random_range(1..=t_max);
            let eps = Grid::from_fn(h, w, |_, _| self.rng.sample(StandardNormal));
            let target = make_target(p, &self.variant)?;
            let noised = q_sample(&target, t, &eps, &self.sched)?;
            let mask = self.variant.uses_mask_channel().then_some(p.mask.as_ref()).flatten();
            let x = make_model_input(p.pre.pixels(), &noised.x_t, mask, &self.variant)?;
            input.extend_from_slice(x.data());
            pre_data.extend_from_slice(p.pre.pixels().data());
            post_data.extend_from_slice(p.post.pixels().data());
            ts.push(t);
        }

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![n, self.variant.in_channels(), h, w], input));
        let out = self.net.forward(&mut g, &self.store, x, &ts)?;
        let pred = match self.variant.target {
            Target::Pc => out,
            Target::Sub => {
                let pre = g.constant(Tensor::new(vec![n, 1, h, w], pre_data));
                let half = g.scale(out, SUBTRACTION_SCALE);
                let sum = g.add(half, pre);
                g.clamp(sum, 0.0, 1.0)
            }
        };
        let post = g.constant(Tensor::new(vec![n, 1, h, w], post_data));
        let (loss, breakdown) = match self.variant.loss {
            LossKind::Global => image_loss_var(&mut g, self.ext, &self.weights.global, pred, post),
            LossKind::TumorAware => {
                let pres: Vec<Grid> = batch.iter().map(|p| p.pre.pixels().clone()).collect();
                let masks: Vec<Grid> = batch.iter().map(SlicePair::mask_or_zeros).collect();
                tumor_loss_var(&mut g, self.ext, &self.weights, pred, post, &pres, &masks)
            }
        };
        if !g.scalar(loss).is_finite() {
            let items: Vec<String> = batch
                .iter()
                .map(|p| format!("{}_{}", p.patient_id, p.slice_index))
                .collect();
            let diagnostics = serde_json::json!({
                "items": items,
                "timesteps": ts,
                "breakdown": breakdown,
                "prediction_finite": g.value(pred).all_finite(),
            });
            return Err(Error::NonFiniteLoss {
                step: self.step,
                diagnostics: diagnostics.to_string(),
            });
        }
        let grads = g.backward(loss);
        let pgrads = self.store.gradients(&g, &grads);
        self.opt.step(self.store.values_mut(), &pgrads)?;
        self.step += 1;
        let decay = if self.cfg.ema_warmup {
            warmup_decay(self.cfg.ema_lambda, self.step)
        } else {
            self.cfg.ema_lambda
        };
        ema_update(&mut self.ema, self.store.values(), decay)?;
        Ok(breakdown)
    }

    /// Next batch of indices into a dataset of size `n`, reshuffling with
    /// the trainer RNG at each epoch boundary.
    pub fn next_batch_indices(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size.min(n) {
            if self.cursor >= self.order.len() || self.order.len() != n {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Trains until the step budget is reached. With `out_dir`, appends the
    /// loss log, writes periodic checkpoints and the final checkpoint.
    pub fn run(
        &mut self,
        data: &[SlicePair],
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&LogRecord),
    ) -> Result<TrainSummary> {
        if data.is_empty() {
            return Err(Error::InvalidValue("no training pairs".into()));
        }
        let total = self.total_steps(data.len());
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(LOSS_LOG);
                Some((
                    fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&p)
                        .map_err(|e| Error::io(&p, e))?,
                    p,
                ))
            }
            None => None,
        };
        let (mut first, mut last) = (f64::NAN, f64::NAN);
        while self.step < total {
            let idx = self.next_batch_indices(data.len());
            let batch: Vec<SlicePair> = idx.iter().map(|&i| data[i].clone()).collect();
            let bd = self.train_step(&batch)?;
            if first.is_nan() {
                first = bd.total;
            }
            last = bd.total;
            let rec = LogRecord::from_breakdown(self.step, &bd);
            if let Some((file, path)) = log.as_mut() {
                if self.step.is_multiple_of(self.cfg.log_every.max(1)) || self.step == total {
                    writeln!(file, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(path.as_path(), e))?;
                }
            }
            on_step(&rec);
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0
                    && self.step.is_multiple_of(self.cfg.checkpoint_every)
                    && self.step < total
                {
                    self.checkpoint()
                        .save(&dir.join("checkpoints").join(format!("step_{:06}.cdck", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(TrainSummary {
            variant: self.variant.name(),
            steps: self.step,
            first_loss: first,
            last_loss: last,
        })
    }
}
