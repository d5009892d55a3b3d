//! Strict TOML experiment configuration.
//!
//! ```toml
//! variant = "SUB(Vanilla)"
//! data = "data/manifest.jsonl"
//! output_dir = "runs/sub"
//! seed = 7
//!
//! [diffusion]
//! T = 1000
//! cosine_s = 0.008
//! sigma_rule = "posterior"
//!
//! [sampling]
//! steps = 50
//!
//! [train]
//! steps = 2000
//! optimizer = { lr = 5e-4, beta1 = 0.9, beta2 = 0.999, weight_decay = 0.01 }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::perceptual::PerceptualConfig;
use crate::schedule::{DiffusionConfig, PosteriorForm};
use crate::training::{NamedVariant, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub steps: usize,
    #[serde(default)]
    pub posterior_form: PosteriorForm,
    #[serde(default = "default_sample_batch")]
    pub batch_size: usize,
}

fn default_sample_batch() -> usize {
    8
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            posterior_form: PosteriorForm::default(),
            batch_size: default_sample_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub perceptual: PerceptualConfig,
}

/// Synthetic corpus generated in place of `data` when present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSource {
    pub cases: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
}

fn default_size() -> usize {
    64
}
fn default_depth() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Trained and evaluated after the main variant.
    #[serde(default)]
    pub extra_variants: Vec<NamedVariant>,
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
    #[serde(default)]
    pub phantom: Option<PhantomSource>,
    /// Test items shown in the qualitative grid.
    #[serde(default = "default_grid_rows")]
    pub grid_rows: usize,
}

fn default_modes() -> Vec<String> {
    vec!["full".into(), "roi".into()]
}
fn default_grid_rows() -> usize {
    4
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            extra_variants: Vec::new(),
            modes: default_modes(),
            phantom: None,
            grid_rows: default_grid_rows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: NamedVariant,
    /// Dataset manifest; ignored when `pipeline.phantom` is set.
    #[serde(default)]
    pub data: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative paths are resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(d) = cfg.data.as_mut().filter(|d| d.is_relative()) {
            *d = base.join(&*d);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.sampling.steps == 0 || self.sampling.steps > self.diffusion.t_max {
            return Err(Error::Config(format!(
                "sampling.steps {} must be in 1..={}",
                self.sampling.steps, self.diffusion.t_max
            )));
        }
        for m in &self.pipeline.modes {
            m.parse::<crate::evaluation::Mode>()?;
        }
        Ok(())
    }

    /// Every variant the pipeline trains, main one first, duplicates dropped.
    pub fn variants(&self) -> Vec<crate::training::VariantSpec> {
        let mut out = vec![self.variant.0];
        for v in &self.pipeline.extra_variants {
            if !out.contains(&v.0) {
                out.push(v.0);
            }
        }
        out
    }

    /// SHA-256 of the canonical JSON form. Paths are hashed as written
    /// after resolution.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
variant = "SUB-ROI(L)"
output_dir = "out"
seed = 3

[pipeline]
phantom = { cases = 8 }
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.variant.0.name(), "SUB-ROI(L)");
        assert_eq!(cfg.diffusion, DiffusionConfig::default());
        assert_eq!(cfg.sampling.steps, 50);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.pipeline.modes, ["full", "roi"]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\n[train]\nlearning_rate = 0.1\n");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad_top = format!("colour = 1\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml(&bad_top).is_err());
        let seed_in_train = format!("{MINIMAL}\n[train]\nseed = 1\n");
        assert!(ExperimentConfig::from_toml(&seed_in_train).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        let text = MINIMAL.replace("seed = 3", "");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn diffusion_keys_follow_the_documented_names() {
        let text = format!("{MINIMAL}\n[diffusion]\nT = 200\ncosine_s = 0.01\nsigma_rule = \"beta\"\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.diffusion.t_max, 200);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml(&MINIMAL.replace("seed = 3", "seed = 4")).unwrap();
        assert_eq!(a.hash(), ExperimentConfig::from_toml(MINIMAL).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn extra_variants_deduplicate() {
        let text = format!("{MINIMAL}extra_variants = [\"SUB(Vanilla)\", \"SUB-ROI(L)\"]\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let names: Vec<String> = cfg.variants().iter().map(|v| v.name()).collect();
        assert_eq!(names, ["SUB-ROI(L)", "SUB(Vanilla)"]);
    }
}
