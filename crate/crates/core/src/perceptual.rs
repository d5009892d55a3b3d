//! Frozen convolutional feature networks for the perceptual loss and the
//! FID embedding.
//!
//! Two backends exist. The fallback is a three-stage random-weight pyramid
//! drawn from a fixed seed, always available. The pretrained backend reads
//! VGG16 convolution weights (torchvision `features.N.weight` naming) from
//! a `.safetensors` file and uses the first three stages.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Side length crops are resized to before feature extraction.
pub const MIN_FEATURE_INPUT: usize = 32;
const FALLBACK_SEED: u64 = 0x00C0_FFEE;

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// Feature maps of `x: [n, 1, h, w]`, shallow to deep.
    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var>;

    /// Global-average-pooled features of every stage, concatenated.
    fn embed(&self, img: &Grid) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(grid_tensor(img));
        let mut out = Vec::new();
        for f in self.features(&mut g, x) {
            let (_, c, h, w) = g.value(f).dims4();
            let data = g.value(f).data();
            for ch in 0..c {
                let plane = &data[ch * h * w..(ch + 1) * h * w];
                out.push(plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64);
            }
        }
        out
    }
}

pub(crate) fn grid_tensor(img: &Grid) -> Tensor {
    Tensor::new(vec![1, 1, img.height(), img.width()], img.data().to_vec())
}

struct ConvLayer {
    w: Tensor,
    b: Tensor,
}

impl ConvLayer {
    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let y = g.conv2d(x, w, Some(b), 1, 1);
        g.relu(y)
    }
}

/// `conv 3→16, relu | pool, conv 16→32, relu | pool, conv 32→64, relu`,
/// with features taken after each relu.
pub struct FallbackExtractor {
    layers: Vec<ConvLayer>,
}

impl FallbackExtractor {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(FALLBACK_SEED);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for (i, (cin, cout)) in [(3, 16), (16, 32), (32, 64)].into_iter().enumerate() {
            let fan_in = cin * 9;
            let w = store.uniform_fan_in(format!("f{i}.w"), &[cout, cin, 3, 3], fan_in, &mut rng);
            let b = store.uniform_fan_in(format!("f{i}.b"), &[cout], fan_in, &mut rng);
            layers.push(ConvLayer {
                w: store.value(w).clone(),
                b: store.value(b).clone(),
            });
        }
        Self { layers }
    }
}

impl Default for FallbackExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor for FallbackExtractor {
    fn name(&self) -> &str {
        "fallback"
    }

    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut h = g.repeat_channels(x, 3);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            h = layer.apply(g, h);
            out.push(h);
        }
        out
    }
}

/// VGG16 stages 1–3 (relu1_2, relu2_2, relu3_3) with ImageNet input
/// normalisation. Average pooling stands in for max pooling between stages.
pub struct Vgg16Extractor {
    stages: Vec<Vec<ConvLayer>>,
    input: ConvLayer,
}

const VGG_STAGES: [&[usize]; 3] = [&[0, 2], &[5, 7], &[10, 12, 14]];
const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

impl Vgg16Extractor {
    pub fn from_safetensors(path: &Path) -> Result<Self> {
        let tensors = read_safetensors(path).map_err(|e| {
            Error::FeatureNetwork(format!(
                "cannot load pretrained feature weights from {}: {e}; \
                 set loss.perceptual.backend = \"fallback\" to use the built-in extractor",
                path.display()
            ))
        })?;
        let take = |name: String| {
            tensors.get(&name).cloned().ok_or_else(|| {
                Error::FeatureNetwork(format!(
                    "{} lacks tensor {name}; set loss.perceptual.backend = \"fallback\"",
                    path.display()
                ))
            })
        };
        let mut stages = Vec::new();
        for idx in VGG_STAGES {
            let mut layers = Vec::new();
            for &i in idx {
                layers.push(ConvLayer {
                    w: take(format!("features.{i}.weight"))?,
                    b: take(format!("features.{i}.bias"))?,
                });
            }
            stages.push(layers);
        }
        // Grey → RGB replication and per-channel normalisation as one 1×1 conv.
        let input = ConvLayer {
            w: Tensor::new(vec![3, 1, 1, 1], IMAGENET_STD.iter().map(|s| 1.0 / s).collect()),
            b: Tensor::new(vec![3], (0..3).map(|c| -IMAGENET_MEAN[c] / IMAGENET_STD[c]).collect()),
        };
        Ok(Self { stages, input })
    }
}

impl FeatureExtractor for Vgg16Extractor {
    fn name(&self) -> &str {
        "vgg16"
    }

    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let w = g.constant(self.input.w.clone());
        let b = g.constant(self.input.b.clone());
        let mut h = g.conv2d(x, w, Some(b), 1, 0);
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            for layer in stage {
                h = layer.apply(g, h);
            }
            out.push(h);
        }
        out
    }
}

/// All `F32` tensors of a safetensors file; other dtypes are skipped.
pub fn read_safetensors(path: &Path) -> std::result::Result<HashMap<String, Tensor>, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let file = SafeTensors::deserialize(&bytes).map_err(|e| e.to_string())?;
    Ok(file
        .tensors()
        .into_iter()
        .filter(|(_, view)| view.dtype() == Dtype::F32)
        .map(|(name, view)| {
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            (name, Tensor::new(view.shape().to_vec(), data))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualBackend {
    Pretrained,
    #[default]
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PerceptualConfig {
    #[serde(default)]
    pub backend: PerceptualBackend,
    /// Safetensors file for the pretrained backend.
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

pub fn load_extractor(cfg: &PerceptualConfig) -> Result<Box<dyn FeatureExtractor>> {
    match cfg.backend {
        PerceptualBackend::Fallback => Ok(Box::new(FallbackExtractor::new())),
        PerceptualBackend::Pretrained => {
            let path = cfg.weights.as_ref().ok_or_else(|| {
                Error::FeatureNetwork(
                    "pretrained perceptual backend selected without loss.perceptual.weights; \
                     set loss.perceptual.backend = \"fallback\" to use the built-in extractor"
                        .into(),
                )
            })?;
            Ok(Box::new(Vgg16Extractor::from_safetensors(path)?))
        }
    }
}

/// Records `mean_l MSE(φ_l(a), φ_l(b))` on the graph.
pub fn perceptual_var(g: &mut Graph, ext: &dyn FeatureExtractor, a: Var, b: Var) -> Var {
    let fa = ext.features(g, a);
    let fb = ext.features(g, b);
    let n = fa.len() as f32;
    let per_layer: Vec<(Var, f32)> = fa
        .into_iter()
        .zip(fb)
        .map(|(x, y)| {
            let d = g.sub(x, y);
            let sq = g.square(d);
            (g.mean(sq), 1.0 / n)
        })
        .collect();
    g.weighted_sum(&per_layer)
}

pub fn perceptual_distance(ext: &dyn FeatureExtractor, a: &Grid, b: &Grid) -> Result<f32> {
    a.ensure_same_shape(b, "perceptual inputs")?;
    let mut g = Graph::new();
    let va = g.constant(grid_tensor(a));
    let vb = g.constant(grid_tensor(b));
    let d = perceptual_var(&mut g, ext, va, vb);
    Ok(g.scalar(d))
}
