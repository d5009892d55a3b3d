use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::SUBTRACTION_SCALE;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Predict the post-contrast image directly.
    Pc,
    /// Predict `(post − pre)/0.5`.
    Sub,
}

impl Target {
    /// Valid range of the clean target, used to clamp x̂₀ while sampling.
    pub fn clamp_range(self) -> (f32, f32) {
        match self {
            Target::Pc => (0.0, 1.0),
            Target::Sub => (-1.0 / SUBTRACTION_SCALE, 1.0 / SUBTRACTION_SCALE),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    PreOnly,
    PrePlusMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Global,
    TumorAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldOfView {
    FullBreast,
    SingleBreast,
}

pub const DEFAULT_EPOCHS: usize = 50;

/// One trainable configuration. The display name is derived from the
/// other fields, e.g. `SUB-ROI(L)`, `PC(Vanilla100)`, `PC-ROI(M)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantSpec {
    pub target: Target,
    pub conditioning: Conditioning,
    pub loss: LossKind,
    pub epochs: usize,
}

impl VariantSpec {
    pub fn new(target: Target, conditioning: Conditioning, loss: LossKind, epochs: usize) -> Self {
        Self {
            target,
            conditioning,
            loss,
            epochs,
        }
    }

    pub fn name(&self) -> String {
        let prefix = match self.target {
            Target::Pc => "PC",
            Target::Sub => "SUB",
        };
        let epochs = if self.epochs == DEFAULT_EPOCHS {
            String::new()
        } else {
            self.epochs.to_string()
        };
        let tag = match (self.conditioning, self.loss) {
            (Conditioning::PreOnly, LossKind::Global) => return format!("{prefix}(Vanilla{epochs})"),
            (Conditioning::PrePlusMask, LossKind::Global) => "M",
            (Conditioning::PreOnly, LossKind::TumorAware) => "L",
            (Conditioning::PrePlusMask, LossKind::TumorAware) => "ML",
        };
        format!("{prefix}-ROI({tag}{epochs})")
    }

    /// File-system and CLI friendly form: `SUB-ROI_L`, `PC_Vanilla100`.
    pub fn slug(&self) -> String {
        self.name().replace('(', "_").replace(')', "")
    }

    pub fn uses_mask_channel(&self) -> bool {
        self.conditioning == Conditioning::PrePlusMask
    }

    pub fn in_channels(&self) -> usize {
        if self.uses_mask_channel() {
            3
        } else {
            2
        }
    }

    /// `base` with the input-channel count this variant needs.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            in_channels: self.in_channels(),
            ..base.clone()
        }
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    /// Accepts both `SUB-ROI(L)` and `SUB-ROI_L` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown variant name {s:?}"));
        let normalized = if s.contains('(') {
            s.to_string()
        } else {
            let i = s.rfind('_').ok_or_else(bad)?;
            format!("{}({})", &s[..i], &s[i + 1..])
        };
        let open = normalized.find('(').ok_or_else(bad)?;
        let inner = normalized[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let head = &normalized[..open];
        let (target, roi) = match head {
            "PC" => (Target::Pc, false),
            "SUB" => (Target::Sub, false),
            "PC-ROI" => (Target::Pc, true),
            "SUB-ROI" => (Target::Sub, true),
            _ => return Err(bad()),
        };
        let split = inner.find(|c: char| c.is_ascii_digit()).unwrap_or(inner.len());
        let (tag, digits) = inner.split_at(split);
        let epochs = if digits.is_empty() {
            DEFAULT_EPOCHS
        } else {
            digits.parse().map_err(|_| bad())?
        };
        let (conditioning, loss) = match (roi, tag) {
            (false, "Vanilla") => (Conditioning::PreOnly, LossKind::Global),
            (true, "M") => (Conditioning::PrePlusMask, LossKind::Global),
            (true, "L") => (Conditioning::PreOnly, LossKind::TumorAware),
            (true, "ML") => (Conditioning::PrePlusMask, LossKind::TumorAware),
            _ => return Err(bad()),
        };
        let v = Self::new(target, conditioning, loss, epochs);
        if v.name() != normalized {
            return Err(bad());
        }
        Ok(v)
    }
}

impl Serialize for NamedVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.name())
    }
}

impl<'de> Deserialize<'de> for NamedVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map(NamedVariant).map_err(serde::de::Error::custom)
    }
}

/// A variant that (de)serializes as its display name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NamedVariant(pub VariantSpec);

/// The variants compared for each field of view.
pub fn registry(fov: FieldOfView) -> Vec<VariantSpec> {
    use Conditioning::*;
    use LossKind::*;
    use Target::*;
    match fov {
        FieldOfView::FullBreast => vec![
            VariantSpec::new(Pc, PreOnly, Global, 50),
            VariantSpec::new(Pc, PreOnly, Global, 100),
            VariantSpec::new(Pc, PrePlusMask, Global, 50),
            VariantSpec::new(Pc, PrePlusMask, Global, 100),
            VariantSpec::new(Pc, PreOnly, TumorAware, 50),
            VariantSpec::new(Sub, PreOnly, Global, 50),
            VariantSpec::new(Sub, PreOnly, TumorAware, 50),
        ],
        FieldOfView::SingleBreast => vec![
            VariantSpec::new(Pc, PreOnly, Global, 50),
            VariantSpec::new(Pc, PreOnly, TumorAware, 50),
            VariantSpec::new(Sub, PreOnly, Global, 50),
            VariantSpec::new(Sub, PreOnly, TumorAware, 50),
        ],
    }
}
