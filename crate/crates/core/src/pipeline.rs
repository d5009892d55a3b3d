//! End-to-end orchestration: data, training, sampling, evaluation and
//! figures, tied together by a run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::SlicePair;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, EvalReport, GenerationMeta, Mode};
use crate::io::{quantize_u8, write_gray_png, write_rgb_png};
use crate::losses::{mask_bbox, LossWeights};
use crate::manifest::{load_split, DatasetManifest, Split};
use crate::perceptual::{load_extractor, FeatureExtractor};
use crate::phantom::{generate_corpus, CorpusParams};
use crate::preprocess::{build_dataset, SlicePolicy};
use crate::schedule::DiffusionSchedule;
use crate::training::{generate, Checkpoint, Denoiser, TrainSummary, Trainer, VariantSpec, FINAL_CHECKPOINT};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// First 16 hex digits of the SHA-256 of a checkpoint file.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: String,
    pub checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub generated_dir: PathBuf,
    pub report: PathBuf,
    pub train: TrainSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub data_manifest: PathBuf,
    pub data_hash: String,
    pub variants: Vec<VariantRun>,
    pub report: Option<PathBuf>,
    pub grids: Vec<PathBuf>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let p = dir.join(RUN_MANIFEST);
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }
}

/// Generates a phantom corpus and turns it into a slice dataset.
pub fn prepare_phantom_dataset(
    cases: usize,
    size: usize,
    depth: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let corpus = generate_corpus(&CorpusParams {
        n_cases: cases,
        image_size: size,
        depth,
        seed,
        ..CorpusParams::default()
    })?;
    let split: BTreeMap<String, Split> = corpus.iter().map(|(c, s)| (c.patient_id.clone(), *s)).collect();
    let cases: Vec<_> = corpus.into_iter().map(|(c, _)| c).collect();
    let policy = SlicePolicy {
        rng_seed: seed,
        ..SlicePolicy::default()
    };
    Ok(build_dataset(&cases, &policy, &split, out_dir)?.manifest)
}

/// Writes `{key}.png` for every pair plus a [`GenerationMeta`] sidecar.
#[allow(clippy::too_many_arguments)]
pub fn sample_to_dir(
    ckpt: &Checkpoint,
    checkpoint_id: &str,
    pairs: &[SlicePair],
    manifest_hash: &str,
    steps: usize,
    seed: u64,
    batch_size: usize,
    out_dir: &Path,
) -> Result<GenerationMeta> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let variant = ckpt.header.variant.0;
    let den = Denoiser::from_checkpoint(ckpt)?;
    let sched = DiffusionSchedule::from_config(&ckpt.header.diffusion)?;
    for g in generate(&den, &variant, pairs, &sched, steps, seed, batch_size)? {
        write_gray_png(
            &out_dir.join(format!("{}_{}.png", g.patient_id, g.slice_index)),
            &g.post,
        )?;
    }
    let meta = GenerationMeta {
        variant: variant.name(),
        checkpoint_id: checkpoint_id.to_string(),
        manifest_hash: manifest_hash.to_string(),
        steps,
        seed,
    };
    meta.save(out_dir)?;
    Ok(meta)
}

/// Tiles `rows` of `[pre, real post, variant outputs...]` into one RGB
/// image with a 2 px gutter, outlining the lesion box in green.
pub fn qualitative_grid(
    rows: &[(Vec<crate::grid::Grid>, Option<crate::grid::Grid>)],
) -> Result<(usize, usize, Vec<u8>)> {
    const GAP: usize = 2;
    let first = rows
        .first()
        .and_then(|(cells, _)| cells.first())
        .ok_or_else(|| Error::InvalidValue("qualitative grid needs at least one cell".into()))?;
    let (h, w) = first.shape();
    let cols = rows[0].0.len();
    let (width, height) = (cols * w + (cols + 1) * GAP, rows.len() * h + (rows.len() + 1) * GAP);
    let mut rgb = vec![255u8; width * height * 3];
    for (r, (cells, mask)) in rows.iter().enumerate() {
        if cells.len() != cols {
            return Err(Error::Shape("every grid row needs the same number of columns".into()));
        }
        let bbox = mask.as_ref().and_then(mask_bbox);
        for (c, img) in cells.iter().enumerate() {
            img.ensure_same_shape(first, "grid cell")?;
            let (oy, ox) = (GAP + r * (h + GAP), GAP + c * (w + GAP));
            for y in 0..h {
                for x in 0..w {
                    let v = quantize_u8(img.get(y, x));
                    let i = ((oy + y) * width + ox + x) * 3;
                    rgb[i..i + 3].copy_from_slice(&[v, v, v]);
                }
            }
            if let Some((by, bx, bh, bw)) = bbox {
                let (y0, x0) = (by.saturating_sub(1), bx.saturating_sub(1));
                let (y1, x1) = ((by + bh).min(h - 1), (bx + bw).min(w - 1));
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        if y == y0 || y == y1 || x == x0 || x == x1 {
                            let i = ((oy + y) * width + ox + x) * 3;
                            rgb[i..i + 3].copy_from_slice(&[0, 255, 0]);
                        }
                    }
                }
            }
        }
    }
    Ok((width, height, rgb))
}

/// Runs every stage for the configured variants. Refuses to overwrite an
/// existing run unless `force` is set. `progress` receives one line per
/// notable event.
pub fn run_pipeline(cfg: &ExperimentConfig, force: bool, mut progress: impl FnMut(&str)) -> Result<RunManifest> {
    let out = cfg.output_dir.clone();
    let hash = cfg.hash();
    if out.join(RUN_MANIFEST).exists() && !force {
        let existing = RunManifest::load(&out).map(|m| m.config_hash).unwrap_or_default();
        let why = if existing == hash {
            "this configuration was already run"
        } else {
            "the output directory holds a different run"
        };
        return Err(Error::Conflict(format!(
            "{why} ({}); pass --force to overwrite",
            out.join(RUN_MANIFEST).display()
        )));
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let manifest_path = match (&cfg.pipeline.phantom, &cfg.data) {
        (Some(ph), _) => {
            progress(&format!("preprocess: generating {} phantom cases", ph.cases));
            let dir = out.join("data");
            stage(
                "preprocess",
                prepare_phantom_dataset(ph.cases, ph.size, ph.depth, cfg.seed, &dir),
            )?;
            dir.join(crate::manifest::MANIFEST_FILE)
        }
        (None, Some(p)) => p.clone(),
        (None, None) => return Err(Error::Config("set `data` or `pipeline.phantom`".into())),
    };
    let manifest = stage("preprocess", DatasetManifest::load(&manifest_path))?;
    let data_hash = manifest.content_hash();
    let train = stage("preprocess", load_split(&manifest_path, &manifest, Split::Train))?;
    let test = stage("preprocess", load_split(&manifest_path, &manifest, Split::Test))?;
    progress(&format!("data: {} train / {} test pairs", train.len(), test.len()));

    let ext: Box<dyn FeatureExtractor> = stage("train", load_extractor(&cfg.loss.perceptual))?;
    let modes: Vec<Mode> = cfg.pipeline.modes.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    let mut runs = Vec::new();
    let mut merged: Option<EvalReport> = None;
    let mut outputs: Vec<(VariantSpec, PathBuf)> = Vec::new();
    for variant in cfg.variants() {
        let slug = variant.slug();
        let model_dir = out.join("models").join(&slug);
        progress(&format!("train: {variant}"));
        let summary = stage("train", {
            Trainer::new(
                variant,
                &cfg.model,
                cfg.diffusion,
                cfg.train.clone(),
                LossWeights::default(),
                ext.as_ref(),
            )
            .and_then(|mut t| {
                t.run(&train, Some(&model_dir), |r| {
                    if r.step % 100 == 0 {
                        progress(&format!("  step {} loss {:.5}", r.step, r.total));
                    }
                })
            })
        })?;
        let ckpt_path = model_dir.join(FINAL_CHECKPOINT);
        let ckpt_id = stage("train", checkpoint_id(&ckpt_path))?;
        let ckpt = stage("sample", Checkpoint::load(&ckpt_path))?;
        let gen_dir = out.join("generated").join(&slug);
        progress(&format!("sample: {variant} on {} test pairs", test.len()));
        stage(
            "sample",
            sample_to_dir(
                &ckpt,
                &ckpt_id,
                &test,
                &data_hash,
                cfg.sampling.steps,
                cfg.seed,
                cfg.sampling.batch_size,
                &gen_dir,
            ),
        )?;
        progress(&format!("evaluate: {variant}"));
        let report = stage(
            "evaluate",
            evaluate_run(&manifest_path, &gen_dir, &modes, ext.as_ref(), Some(variant)),
        )?;
        let report_dir = out.join("reports");
        fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
        let report_path = report_dir.join(format!("{slug}.json"));
        stage("evaluate", write_report_files(&report, &report_path))?;
        merged = Some(match merged {
            None => report.clone(),
            Some(mut m) => {
                for row in report.rows {
                    if m.row(&row.row_name, &row.reference, row.mode).is_none() {
                        m.rows.push(row);
                    }
                }
                m.variant = None;
                m.model_checkpoint_id = None;
                m
            }
        });
        outputs.push((variant, gen_dir.clone()));
        runs.push(VariantRun {
            variant: variant.name(),
            checkpoint: ckpt_path,
            checkpoint_id: ckpt_id,
            generated_dir: gen_dir,
            report: report_path,
            train: summary,
        });
    }
    let report_path = out.join("report.json");
    if let Some(m) = &merged {
        stage("evaluate", write_report_files(m, &report_path))?;
    }

    let grid_path = out.join("figures").join("qualitative.png");
    stage(
        "figures",
        write_qualitative(&test, &outputs, cfg.pipeline.grid_rows, &grid_path),
    )?;
    let run = RunManifest {
        config_hash: hash,
        config: cfg.clone(),
        data_manifest: manifest_path,
        data_hash,
        variants: runs,
        report: merged.map(|_| report_path),
        grids: vec![grid_path],
    };
    run.save(&out)?;
    Ok(run)
}

/// `report.json` plus sibling `.txt` table and `.csv` per-case file.
pub fn write_report_files(report: &EvalReport, json_path: &Path) -> Result<()> {
    report.save(json_path)?;
    let txt = json_path.with_extension("txt");
    fs::write(&txt, report.render_text()).map_err(|e| Error::io(&txt, e))?;
    let csv = json_path.with_extension("csv");
    fs::write(&csv, report.to_csv()?).map_err(|e| Error::io(&csv, e))
}

fn write_qualitative(test: &[SlicePair], outputs: &[(VariantSpec, PathBuf)], n_rows: usize, path: &Path) -> Result<()> {
    let mut chosen: Vec<&SlicePair> = test.iter().filter(|p| p.tumor_label).take(n_rows).collect();
    if chosen.is_empty() {
        chosen = test.iter().take(n_rows.max(1)).collect();
    }
    let mut rows = Vec::new();
    for p in chosen {
        let mut cells = vec![p.pre.pixels().clone(), p.post.pixels().clone()];
        for (_, dir) in outputs {
            cells.push(crate::io::read_gray_png(
                &dir.join(format!("{}_{}.png", p.patient_id, p.slice_index)),
            )?);
        }
        rows.push((cells, p.mask.clone()));
    }
    let (w, h, rgb) = qualitative_grid(&rows)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_rgb_png(path, w, h, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn grid_has_one_column_per_image() {
        let cell = Grid::filled(8, 8, 0.5);
        let mut mask = Grid::zeros(8, 8);
        mask.set(3, 3, 1.0);
        let rows = vec![(vec![cell.clone(); 4], Some(mask)), (vec![cell; 4], None)];
        let (w, h, rgb) = qualitative_grid(&rows).unwrap();
        assert_eq!((w, h), (4 * 8 + 5 * 2, 2 * 8 + 3 * 2));
        // Box corner at (2, 2) inside the first cell is green.
        let i = ((2 + 2) * w + 2 + 2) * 3;
        assert_eq!(&rgb[i..i + 3], &[0, 255, 0]);
    }
}
