use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dcesynth::config::ExperimentConfig;
use dcesynth::evaluation::{evaluate_run, EvalReport, Mode};
use dcesynth::losses::LossWeights;
use dcesynth::manifest::{load_split, DatasetManifest, Split};
use dcesynth::perceptual::{load_extractor, PerceptualBackend, PerceptualConfig};
use dcesynth::phantom::{generate_corpus, CorpusParams};
use dcesynth::pipeline::{checkpoint_id, run_pipeline, sample_to_dir, write_report_files};
use dcesynth::preprocess::{build_dataset, SideSplit, SlicePolicy};
use dcesynth::reader::{ImagePool, ReaderService};
use dcesynth::training::{Checkpoint, Trainer, VariantSpec, FINAL_CHECKPOINT};
use dcesynth::volume::{read_case_dirs, write_case_dir};

#[derive(Parser)]
#[command(
    name = "dcesynth",
    version,
    about = "Pre-contrast conditioned diffusion for breast DCE-MRI synthesis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Fallback,
    Pretrained,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Csv,
    Json,
}

#[derive(clap::Args)]
struct PerceptualArgs {
    /// Feature network for LPIPS-style distances and FID.
    #[arg(long, value_enum, default_value = "fallback")]
    perceptual: Backend,
    /// Safetensors weights for the pretrained backend.
    #[arg(long)]
    perceptual_weights: Option<PathBuf>,
}

impl PerceptualArgs {
    fn config(&self) -> PerceptualConfig {
        PerceptualConfig {
            backend: match self.perceptual {
                Backend::Fallback => PerceptualBackend::Fallback,
                Backend::Pretrained => PerceptualBackend::Pretrained,
            },
            weights: self.perceptual_weights.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic volume cases in the preprocess input layout.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        cases: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        depth: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Select, normalize and export slices into a manifest-backed dataset.
    Preprocess {
        /// Directory of case folders (pre/post/mask volumes plus case.json).
        #[arg(long, alias = "input")]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        adjacent_fraction: f64,
        /// Keep one breast per case, split at the midline.
        #[arg(long)]
        single_breast: bool,
    },
    /// Train one variant using an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's variant.
        #[arg(long)]
        variant: Option<String>,
        /// Overrides the config's `data` manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a resumable checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory; defaults to `<output_dir>/models/<variant>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate post-contrast images for one split from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score generated images against the test split.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, default_value = "full,roi", value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Variant name when the generated directory has no sidecar.
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        perceptual: PerceptualArgs,
    },
    /// Render a saved evaluation report.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
    /// Run preprocess, train, sample, evaluate and figures from one config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite an existing run in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Assemble a reader-study image pool from generated directories.
    ReaderPool {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        generated: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the reader-study API over a pool directory.
    ReaderServe {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Phantom {
            out,
            cases,
            size,
            depth,
            seed,
        } => {
            let corpus = generate_corpus(&CorpusParams {
                n_cases: cases,
                image_size: size,
                depth,
                seed,
                ..CorpusParams::default()
            })?;
            for (case, split) in &corpus {
                write_case_dir(&out, case, *split)?;
            }
            println!("wrote {} cases to {}", corpus.len(), out.display());
        }
        Command::Preprocess {
            cases,
            out,
            seed,
            adjacent_fraction,
            single_breast,
        } => {
            let (cases, splits) = read_case_dirs(&cases)?;
            let policy = SlicePolicy {
                adjacent_fraction,
                side_split: if single_breast {
                    SideSplit::Midline
                } else {
                    SideSplit::None
                },
                rng_seed: seed,
            };
            let built = build_dataset(&cases, &policy, &splits, &out)?;
            for w in &built.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} records ({} train / {} test) in {}",
                built.manifest.records.len(),
                built.manifest.records_in(Split::Train).count(),
                built.manifest.records_in(Split::Test).count(),
                out.display()
            );
        }
        Command::Train {
            config,
            variant,
            manifest,
            resume,
            out,
        } => train(&config, variant, manifest, resume, out)?,
        Command::Sample {
            checkpoint,
            manifest,
            out,
            steps,
            seed,
            batch_size,
            split,
        } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => bail!("unknown split {other:?}"),
            };
            let ckpt = Checkpoint::load(&checkpoint)?;
            let m = DatasetManifest::load(&manifest)?;
            let pairs = load_split(&manifest, &m, split)?;
            let meta = sample_to_dir(
                &ckpt,
                &checkpoint_id(&checkpoint)?,
                &pairs,
                &m.content_hash(),
                steps,
                seed,
                batch_size,
                &out,
            )?;
            println!("{} images from {} in {}", pairs.len(), meta.variant, out.display());
        }
        Command::Evaluate {
            manifest,
            generated,
            modes,
            out,
            variant,
            perceptual,
        } => {
            let modes: Vec<Mode> = modes.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
            let variant: Option<VariantSpec> = variant.map(|v| v.parse()).transpose()?;
            let ext = load_extractor(&perceptual.config())?;
            let report = evaluate_run(&manifest, &generated, &modes, ext.as_ref(), variant)?;
            write_report_files(&report, &out)?;
            print!("{}", report.render_text());
        }
        Command::Report { report, format } => {
            let r = EvalReport::load(&report)?;
            match format {
                ReportFormat::Text => print!("{}", r.render_text()),
                ReportFormat::Csv => print!("{}", r.to_csv()?),
                ReportFormat::Json => println!("{}", r.to_json()?),
            }
        }
        Command::Pipeline { config, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = run_pipeline(&cfg, force, |line| eprintln!("{line}"))?;
            println!(
                "run manifest: {}",
                cfg.output_dir.join(dcesynth::pipeline::RUN_MANIFEST).display()
            );
            if let Some(r) = run.report {
                print!("{}", EvalReport::load(&r)?.render_text());
            }
        }
        Command::ReaderPool {
            manifest,
            generated,
            out,
        } => {
            let pool = ImagePool::build(&manifest, &generated, &out)?;
            println!("pool of {} cases in {}", pool.entries.len(), out.display());
        }
        Command::ReaderServe { pool, port, host } => serve(&pool, &host, port)?,
    }
    Ok(())
}

fn train(
    config: &Path,
    variant: Option<String>,
    manifest: Option<PathBuf>,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = manifest
        .or_else(|| cfg.data.clone())
        .context("`train` needs --manifest or `data` in the config")?;
    let manifest = DatasetManifest::load(&data)?;
    let pairs = load_split(&data, &manifest, Split::Train)?;
    let ext = load_extractor(&cfg.loss.perceptual)?;
    let mut trainer = match &resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            Trainer::resume(&ckpt, cfg.train.clone(), LossWeights::default(), ext.as_ref())?
        }
        None => {
            let v: VariantSpec = match variant {
                Some(v) => v.parse()?,
                None => cfg.variant.0,
            };
            Trainer::new(
                v,
                &cfg.model,
                cfg.diffusion,
                cfg.train.clone(),
                LossWeights::default(),
                ext.as_ref(),
            )?
        }
    };
    let out = out.unwrap_or_else(|| cfg.output_dir.join("models").join(trainer.variant().slug()));
    eprintln!(
        "training {} on {} pairs into {}",
        trainer.variant(),
        pairs.len(),
        out.display()
    );
    let summary = trainer.run(&pairs, Some(&out), |r| {
        if r.step % 50 == 0 {
            eprintln!("step {} loss {:.5}", r.step, r.total);
        }
    })?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn serve(pool_dir: &Path, host: &str, port: u16) -> Result<()> {
    let pool = ImagePool::load(pool_dir)?;
    let service = ReaderService::new(pool).with_log(pool_dir.join("responses.jsonl"));
    let app = dcesynth_cli::router(Arc::new(Mutex::new(service)));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        eprintln!("reader API on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        Ok(())
    })
}
