use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use meshspace::depthhead::CameraIntrinsics;
use meshspace::harness::model::images_tensor;
use meshspace::harness::train::predict_samples;
use meshspace::harness::{
    evaluate, export_metrics, export_obj, gen_synthetic_dataset, load_dataset, load_run, load_sample, read_pgm,
    train, PckSpace, RunConfig, Sample,
};

#[derive(Parser)]
#[command(name = "meshspace", version, about = "Camera-space hand mesh recovery from a single image")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    PaperScale,
    Overfit,
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset run configuration as JSON.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Render a synthetic dataset of depth-shaded hand images with ground truth.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration whose synthesis settings are used (desk preset if omitted).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model; writes config.json, losses.csv and checkpoint.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint of the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset and write metrics.json and metrics.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Compute PCK on 2D keypoints in pixels instead of camera-space joints in mm.
        #[arg(long)]
        pck_2d: bool,
        /// Output directory for the metric files (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the camera-space mesh for one PGM image and print it as JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// JSON file with fx, fy, cx, cy.
        #[arg(long)]
        cam: PathBuf,
        /// Also write the camera-space mesh as OBJ.
        #[arg(long)]
        obj: Option<PathBuf>,
    },
    /// Predict the camera-space mesh for a dataset sample and write it as OBJ.
    ExportMesh {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample record (sample_XXXXX.json) from a generated dataset.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Desk => RunConfig::desk(),
                Preset::PaperScale => RunConfig::paper_scale(),
                Preset::Overfit => RunConfig::overfit(),
                Preset::Tiny => RunConfig::tiny(),
            };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::GenData { n, seed, out, config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::desk(),
            };
            let ds = gen_synthetic_dataset(n, &cfg.data.synth, seed, &out)?;
            info!("wrote {} samples to {}", ds.samples.len(), out.display());
        }
        Command::Train { config, out, resume } => {
            let cfg = RunConfig::load(&config)?;
            let report = train(&cfg, &out, resume.as_deref())?;
            if let Some(last) = report.records.last() {
                info!("step {} total loss {:.6}", last.step, last.total);
            }
            info!("checkpoint {}", report.checkpoint.display());
        }
        Command::Eval { checkpoint, data, repeats, pck_2d, out } => {
            let run = load_run(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let space = if pck_2d { PckSpace::Image2d } else { PckSpace::Camera3d };
            let (summary, results) = evaluate(&run, &ds.samples, repeats, space)?;
            let dir = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            export_metrics(&summary, &dir.join("metrics.json"), &dir.join("metrics.csv"))?;
            for (name, (m, s)) in meshspace::harness::Metrics::NAMES
                .iter()
                .zip(summary.mean.as_array().into_iter().zip(summary.std.as_array()))
            {
                println!("{name:>4}: {m:.4} ± {s:.4}");
            }
            let depth_err = results.iter().map(|r| r.depth_error).sum::<f64>() / results.len() as f64;
            println!("root depth error (normalized): {depth_err:.4}");
            let fallbacks: usize = results.iter().map(|r| r.fallbacks).sum();
            if fallbacks > 0 {
                log::warn!("{fallbacks} alignments fell back to translation and scale");
            }
        }
        Command::Infer { checkpoint, image, cam, obj } => {
            let run = load_run(&checkpoint)?;
            let (gray, w, h) = read_pgm(&image)?;
            if w != h || w != run.config.image_size {
                bail!("image is {w}x{h}, the model expects {0}x{0}", run.config.image_size);
            }
            let text = fs::read_to_string(&cam).with_context(|| format!("reading {}", cam.display()))?;
            let intr: CameraIntrinsics = serde_json::from_str(&text).with_context(|| format!("parsing {}", cam.display()))?;
            let probe = Sample {
                gray,
                size: w,
                j2d: Vec::new(),
                v3d_rel: Vec::new(),
                j3d_rel: Vec::new(),
                root_depth: 0.0,
                cam: intr,
                seed: 0,
            };
            let images = images_tensor(&[&probe])?;
            let pred = run.model.predict(&run.store, &images, &[intr])?.remove(0);
            if let Some(path) = obj {
                export_obj(&pred.verts_cam, &run.model.mesh.faces, &path)?;
            }
            let out = json!({
                "root_depth": pred.root[2],
                "depth_norm": pred.depth_norm,
                "root": pred.root,
                "j2d": pred.j2d,
                "joints_cam": pred.joints_cam,
                "verts_cam": pred.verts_cam,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::ExportMesh { checkpoint, sample, out } => {
            let run = load_run(&checkpoint)?;
            let s = load_sample(&sample)?;
            let pred = predict_samples(&run.model, &run.store, std::slice::from_ref(&s), 1)?.remove(0);
            export_obj(&pred.verts_cam, &run.model.mesh.faces, &out)?;
            info!("wrote {}", out.display());
        }
    }
    Ok(())
}
