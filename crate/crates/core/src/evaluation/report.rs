use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::frechet::frechet_between;
use super::metrics::{paired_metrics, MeanStd, PairedMetrics};
use super::radiomics::{radiomics_features, ZScore};
use super::{roi_box, ROI_FEATURE_SIZE, ROI_MARGIN};
use crate::data::{min_max_rescale, SubtractionImage, SUBTRACTION_SCALE};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::read_gray_png;
use crate::manifest::{load_pair, manifest_root, DatasetManifest, Split};
use crate::perceptual::FeatureExtractor;
use crate::training::{Target, VariantSpec};

pub const REAL_PRE_VS_REAL_PC: &str = "Real Pre vs Real PC";
pub const REAL_PRE_VS_REAL_SUB: &str = "Real Pre vs Real SUB";
/// Sidecar written next to generated images.
pub const GENERATION_META: &str = "generation.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FullImage,
    Roi,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" | "full_image" => Ok(Mode::FullImage),
            "roi" => Ok(Mode::Roi),
            other => Err(Error::Config(format!(
                "unknown evaluation mode {other:?} (use full or roi)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::FullImage => "full",
            Mode::Roi => "roi",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImage {
    pub key: String,
    #[serde(flatten)]
    pub metrics: PairedMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub n: usize,
    pub mae: MeanStd,
    pub lpips: MeanStd,
    pub ssim: MeanStd,
    pub psnr: MeanStd,
    /// `None` when either set has fewer than two samples.
    pub fid: Option<f64>,
    pub frd: Option<f64>,
}

impl MetricSet {
    pub fn from_per_image(per_image: &[PerImage], fid: Option<f64>, frd: Option<f64>) -> Self {
        let col =
            |f: fn(&PairedMetrics) -> f64| MeanStd::of(&per_image.iter().map(|p| f(&p.metrics)).collect::<Vec<_>>());
        Self {
            n: per_image.len(),
            mae: col(|m| m.mae),
            lpips: col(|m| m.lpips),
            ssim: col(|m| m.ssim),
            psnr: col(|m| m.psnr),
            fid,
            frd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub row_name: String,
    /// Image set the row is measured against: `Real PC` or `Real SUB`.
    pub reference: String,
    pub mode: Mode,
    pub metrics: MetricSet,
    pub per_image: Vec<PerImage>,
    /// Items left out of this row, e.g. slices without a lesion in ROI mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub manifest_hash: String,
    pub model_checkpoint_id: Option<String>,
    #[serde(default)]
    pub variant: Option<String>,
}

/// One generated/real pair as seen by the metric code.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub key: String,
    pub gen: Grid,
    pub real: Grid,
    pub mask: Option<Grid>,
}

/// Computes one report row over `items` in `mode`. In ROI mode each pair
/// is cropped to the mask box (items without lesion pixels are excluded)
/// and crops are resized to 64×64 before perceptual and radiomics
/// feature extraction.
pub fn evaluate_rows(
    ext: &dyn FeatureExtractor,
    row_name: &str,
    reference: &str,
    mode: Mode,
    items: &[EvalItem],
) -> Result<EvalRow> {
    let mut per_image = Vec::new();
    let mut excluded = Vec::new();
    let (mut gen_emb, mut real_emb) = (Vec::new(), Vec::new());
    let (mut gen_rad, mut real_rad) = (Vec::new(), Vec::new());
    for item in items {
        item.gen
            .ensure_same_shape(&item.real, &format!("{} generated vs real", item.key))?;
        let (gen, real) = match mode {
            Mode::FullImage => (item.gen.clone(), item.real.clone()),
            Mode::Roi => match item.mask.as_ref().and_then(|m| roi_box(m, ROI_MARGIN)) {
                Some((y, x, h, w)) => (item.gen.crop(y, x, h, w)?, item.real.crop(y, x, h, w)?),
                None => {
                    excluded.push(item.key.clone());
                    continue;
                }
            },
        };
        let (gen_f, real_f) = match mode {
            Mode::FullImage => (gen.clone(), real.clone()),
            Mode::Roi => (
                gen.resize(ROI_FEATURE_SIZE, ROI_FEATURE_SIZE),
                real.resize(ROI_FEATURE_SIZE, ROI_FEATURE_SIZE),
            ),
        };
        let mut m = paired_metrics(ext, &gen, &real)?;
        m.lpips = crate::perceptual::perceptual_distance(ext, &gen_f, &real_f)? as f64;
        per_image.push(PerImage {
            key: item.key.clone(),
            metrics: m,
        });
        gen_emb.push(ext.embed(&gen_f));
        real_emb.push(ext.embed(&real_f));
        if let (Some(g), Some(r)) = (radiomics_features(&gen_f, None)?, radiomics_features(&real_f, None)?) {
            gen_rad.push(g);
            real_rad.push(r);
        }
    }
    let fid = frechet_between(&real_emb, &gen_emb)?;
    let frd = if real_rad.len() >= 2 {
        let z = ZScore::fit(&real_rad);
        frechet_between(&z.apply(&real_rad), &z.apply(&gen_rad))?
    } else {
        None
    };
    Ok(EvalRow {
        row_name: row_name.to_string(),
        reference: reference.to_string(),
        mode,
        metrics: MetricSet::from_per_image(&per_image, fid, frd),
        per_image,
        excluded,
    })
}

/// Provenance of a directory of generated `{patient}_{slice}.png` images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationMeta {
    pub variant: String,
    pub checkpoint_id: String,
    pub manifest_hash: String,
    pub steps: usize,
    pub seed: u64,
}

impl GenerationMeta {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = dir.join(GENERATION_META);
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(GENERATION_META);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(
            serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?,
        ))
    }
}

/// Scores the generated test-split images against the real ones.
///
/// Every model gets a row against Real PC plus the `Real Pre vs Real PC`
/// baseline. SUB models additionally get a row comparing their implied
/// subtraction image with Real SUB, and the `Real Pre vs Real SUB`
/// baseline; subtraction images are min-max rescaled to `[0, 1]`.
pub fn evaluate_run(
    manifest_path: &Path,
    generated_dir: &Path,
    modes: &[Mode],
    ext: &dyn FeatureExtractor,
    variant: Option<VariantSpec>,
) -> Result<EvalReport> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let meta = GenerationMeta::load(generated_dir)?;
    let variant = match (variant, &meta) {
        (Some(v), _) => Some(v),
        (None, Some(m)) => Some(m.variant.parse()?),
        (None, None) => None,
    };
    let root = manifest_root(manifest_path);
    let records: Vec<_> = manifest.records_in(Split::Test).collect();
    if records.is_empty() {
        return Err(Error::InvalidValue("manifest has no test records".into()));
    }
    let missing: Vec<String> = records
        .iter()
        .map(|r| r.key())
        .filter(|k| !generated_dir.join(format!("{k}.png")).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::NotFound(format!(
            "{} generated image(s) missing in {}: {}",
            missing.len(),
            generated_dir.display(),
            missing.join(", ")
        )));
    }

    let mut pc_items = Vec::new();
    let mut base_pc = Vec::new();
    let mut sub_items = Vec::new();
    let mut base_sub = Vec::new();
    for r in &records {
        let pair = load_pair(&root, r)?;
        let key = r.key();
        let gen = read_gray_png(&generated_dir.join(format!("{key}.png")))?;
        let pre = pair.pre.pixels().clone();
        let real_sub = SubtractionImage::from_pair(&pair)?.display();
        let gen_sub = min_max_rescale(&gen.zip_with(&pre, |g, p| (g - p) / SUBTRACTION_SCALE)?);
        let item = |gen: Grid, real: Grid| EvalItem {
            key: key.clone(),
            gen,
            real,
            mask: pair.mask.clone(),
        };
        pc_items.push(item(gen, pair.post.pixels().clone()));
        base_pc.push(item(pre.clone(), pair.post.pixels().clone()));
        sub_items.push(item(gen_sub, real_sub.clone()));
        base_sub.push(item(pre, real_sub));
    }

    let model_name = variant.map_or_else(|| "Generated".to_string(), |v| v.name());
    let is_sub = variant.is_some_and(|v| v.target == Target::Sub);
    let mut rows = Vec::new();
    for &mode in modes {
        rows.push(evaluate_rows(ext, &model_name, "Real PC", mode, &pc_items)?);
        rows.push(evaluate_rows(ext, REAL_PRE_VS_REAL_PC, "Real PC", mode, &base_pc)?);
        if is_sub {
            rows.push(evaluate_rows(ext, &model_name, "Real SUB", mode, &sub_items)?);
            rows.push(evaluate_rows(ext, REAL_PRE_VS_REAL_SUB, "Real SUB", mode, &base_sub)?);
        }
    }
    Ok(EvalReport {
        rows,
        manifest_hash: manifest.content_hash(),
        model_checkpoint_id: meta.map(|m| m.checkpoint_id),
        variant: variant.map(|v| v.name()),
    })
}

fn fmt_mean_std(m: &MeanStd) -> String {
    if m.mean.is_infinite() {
        "inf".to_string()
    } else if m.mean.is_nan() {
        "-".to_string()
    } else {
        format!("{:.3} ± {:.3}", m.mean, m.std)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn row(&self, name: &str, reference: &str, mode: Mode) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.row_name == name && r.reference == reference && r.mode == mode)
    }

    /// Plain-text table, one block per mode.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mut modes: Vec<Mode> = Vec::new();
        for r in &self.rows {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        for mode in modes {
            let title = match mode {
                Mode::FullImage => "Full image",
                Mode::Roi => "ROI",
            };
            let _ = writeln!(out, "{title}");
            let _ = writeln!(
                out,
                "{:<24} {:<9} {:>4} {:>15} {:>15} {:>15} {:>16} {:>8} {:>8}",
                "Model", "Reference", "N", "MAE", "LPIPS", "SSIM", "PSNR", "FID", "FRD"
            );
            for r in self.rows.iter().filter(|r| r.mode == mode) {
                let m = &r.metrics;
                let _ = writeln!(
                    out,
                    "{:<24} {:<9} {:>4} {:>15} {:>15} {:>15} {:>16} {:>8} {:>8}",
                    r.row_name,
                    r.reference,
                    m.n,
                    fmt_mean_std(&m.mae),
                    fmt_mean_std(&m.lpips),
                    fmt_mean_std(&m.ssim),
                    fmt_mean_std(&m.psnr),
                    fmt_opt(m.fid),
                    fmt_opt(m.frd)
                );
            }
            out.push('\n');
        }
        out
    }

    /// Per-case CSV: one line per (row, image).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidValue(format!("csv: {e}"));
        w.write_record(["row", "reference", "mode", "key", "mae", "ssim", "psnr", "lpips"])
            .map_err(csv_err)?;
        for r in &self.rows {
            for p in &r.per_image {
                let m = &p.metrics;
                w.write_record([
                    r.row_name.clone(),
                    r.reference.clone(),
                    r.mode.to_string(),
                    p.key.clone(),
                    m.mae.to_string(),
                    m.ssim.to_string(),
                    if m.psnr.is_infinite() {
                        "inf".into()
                    } else {
                        m.psnr.to_string()
                    },
                    m.lpips.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidValue(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
