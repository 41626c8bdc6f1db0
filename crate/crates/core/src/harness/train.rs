//! Training loop, checkpoint handling and evaluation of trained runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::{AugmentConfig, RunConfig};
use super::metrics::{compute_metrics, EvalResult, MetricsSummary, PckSpace};
use super::model::{images_tensor, resolve_topology, Batch, HandMeshModel, Prediction};
use super::synth::{augment, gen_samples, load_dataset, sample_seed, Sample};
use super::template::HandTemplate;
use crate::error::{Error, Result};
use crate::losses::TERM_NAMES;
use crate::tensor::{read_checkpoint, write_checkpoint, AdamConfig, AdamState, Checkpoint, ParamStore, Tape};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;

/// Name of the rolling checkpoint inside a run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_CSV_FILE: &str = "losses.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Unweighted terms in the order p2d, d, b, v, p3d, n, e.
    pub terms: [f64; 7],
    pub total: f64,
}

impl StepRecord {
    fn csv_row(&self) -> String {
        let terms: Vec<String> = self.terms.iter().map(|v| v.to_string()).collect();
        format!("{},{},{},{},{}", self.step, self.epoch, self.lr, terms.join(","), self.total)
    }
}

pub fn csv_header() -> String {
    format!("step,epoch,lr,{},total", TERM_NAMES.join(","))
}

pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub model: HandMeshModel,
    pub store: ParamStore,
    pub train_samples: Vec<Sample>,
}

/// Training samples as configured: a dataset directory or in-memory synthesis.
pub fn training_samples(cfg: &RunConfig, num_vertices: usize) -> Result<Vec<Sample>> {
    let samples = match &cfg.data.train_dir {
        Some(dir) => load_dataset(dir)?.samples,
        None => {
            let t = HandTemplate::by_name(&cfg.data.synth.template)?;
            gen_samples(&t, &cfg.data.synth, cfg.data.train_samples, cfg.seed)?
        }
    };
    check_samples(&samples, num_vertices, cfg.image_size)?;
    Ok(samples)
}

/// Held-out samples synthesized from a seed stream disjoint from training.
pub fn eval_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let t = HandTemplate::by_name(&cfg.data.synth.template)?;
    gen_samples(&t, &cfg.data.synth, cfg.data.eval_samples, cfg.seed ^ 0xE7A1_0000_0000_0000)
}

fn check_samples(samples: &[Sample], num_vertices: usize, size: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if let Some(s) = samples.iter().find(|s| s.v3d_rel.len() != num_vertices || s.size != size) {
        return Err(Error::invalid(format!(
            "sample {} has {} vertices at {}px; the model expects {num_vertices} at {size}px",
            s.seed,
            s.v3d_rel.len(),
            s.size
        )));
    }
    Ok(())
}

fn write_atomic(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    write_checkpoint(&tmp, ckpt)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn step_meta(cfg: &RunConfig, step: usize, epoch: usize) -> serde_json::Value {
    json!({ "step": step, "epochs_completed": epoch, "config": cfg })
}

/// Adam over the weighted loss with step decay. Writes `config.json`,
/// `losses.csv` and `checkpoint.ckpt` into `out`. With `resume`, continues
/// from a checkpoint written by an earlier run of the same configuration.
///
/// A non-finite loss or gradient aborts the run and leaves the last
/// checkpoint untouched.
pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let topology = resolve_topology(&cfg.topology)?;
    let mut store = ParamStore::new();
    let model = HandMeshModel::build(cfg, &topology, &mut store)?;
    let samples = training_samples(cfg, model.mesh.num_vertices)?;
    let mut adam = AdamState::new(&store, AdamConfig { lr: cfg.schedule.init, ..AdamConfig::default() });

    let mut step = 0;
    if let Some(path) = resume {
        let ckpt = read_checkpoint(path)?;
        ckpt.restore_params(&mut store)?;
        if !ckpt.restore_adam(&store, &mut adam)? {
            return Err(Error::Checkpoint(format!("{}: no optimizer state to resume from", path.display())));
        }
        step = ckpt.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing step counter".into()))? as usize;
        adam.step_count = step as u64;
    }

    let csv_path = out.join(LOSS_CSV_FILE);
    let mut csv = if resume.is_some() && csv_path.exists() {
        fs::OpenOptions::new().append(true).open(&csv_path).map_err(|e| Error::io(&csv_path, e))?
    } else {
        let mut f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        writeln!(f, "{}", csv_header()).map_err(|e| Error::io(&csv_path, e))?;
        f
    };

    let n = samples.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg
        .max_steps
        .map_or(per_epoch * cfg.schedule.epochs, |m| m.min(per_epoch * cfg.schedule.epochs));
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut records = Vec::new();
    while step < total_steps {
        let epoch = step / per_epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ SHUFFLE_STREAM, epoch)));
        let lr = cfg.schedule.lr_at(epoch);
        adam.set_lr(lr);
        let mut b = step % per_epoch;
        while b < per_epoch && step < total_steps {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let batch_samples = batch_for_step(&samples, idx, &cfg.data.augment, cfg.seed, step);
            let refs: Vec<&Sample> = batch_samples.iter().collect();
            let batch = Batch::from_samples(&refs)?;
            let (record, grads) = {
                let mut tape = Tape::with_params(&store);
                let x = tape.constant(batch.images.clone());
                let fwd = model.forward(&mut tape, x)?;
                let (total, terms) = model.losses(&mut tape, &fwd, &batch)?;
                let tv = tape.value(total).item();
                if !tv.is_finite() {
                    return Err(Error::NonFinite { what: format!("total loss at step {step}"), index: 0 });
                }
                let rec = StepRecord {
                    step,
                    epoch,
                    lr,
                    terms: terms.as_array().map(|v| tape.value(v).item()),
                    total: tv,
                };
                (rec, tape.backward(total)?.into_param_grads(&store))
            };
            adam.step(&mut store, &grads)?;
            writeln!(csv, "{}", record.csv_row()).map_err(|e| Error::io(&csv_path, e))?;
            records.push(record);
            step += 1;
            b += 1;
        }
        let done = step / per_epoch;
        let finished = step == total_steps;
        if finished || (step % per_epoch == 0 && done % cfg.checkpoint_every == 0) {
            let ckpt = Checkpoint::from_store(&store, step_meta(cfg, step, done)).with_adam(&store, &adam);
            write_atomic(&ckpt_path, &ckpt)?;
            log::info!(
                "epoch {done} step {step}: loss {:.6}",
                records.last().map_or(f64::NAN, |r| r.total)
            );
        }
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(TrainReport {
        records,
        checkpoint: ckpt_path,
        steps: step,
        model,
        store,
        train_samples: samples,
    })
}

/// Samples of one step, augmented with a stream derived from the step index.
fn batch_for_step(samples: &[Sample], idx: &[usize], aug: &AugmentConfig, seed: u64, step: usize) -> Vec<Sample> {
    idx.iter()
        .enumerate()
        .map(|(j, &i)| {
            if aug.enabled {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed ^ AUGMENT_STREAM, step * 4096 + j));
                augment(&samples[i], aug, &mut rng)
            } else {
                samples[i].clone()
            }
        })
        .collect()
}

/// A trained network restored from a checkpoint.
pub struct LoadedRun {
    pub config: RunConfig,
    pub model: HandMeshModel,
    pub store: ParamStore,
    pub step: usize,
}

pub fn load_run(checkpoint: &Path) -> Result<LoadedRun> {
    let ckpt = read_checkpoint(checkpoint)?;
    let config: RunConfig = serde_json::from_value(ckpt.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad run config: {e}", checkpoint.display())))?;
    let topology = resolve_topology(&config.topology)?;
    let mut store = ParamStore::new();
    let model = HandMeshModel::build(&config, &topology, &mut store)?;
    ckpt.restore_params(&mut store)?;
    Ok(LoadedRun {
        step: ckpt.meta["step"].as_u64().unwrap_or(0) as usize,
        config,
        model,
        store,
    })
}

/// Predictions in chunks of `batch` images.
pub fn predict_samples(model: &HandMeshModel, store: &ParamStore, samples: &[Sample], batch: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = images_tensor(&refs)?;
        let cams: Vec<_> = chunk.iter().map(|s| s.cam).collect();
        out.extend(model.predict(store, &images, &cams)?);
    }
    Ok(out)
}

pub fn evaluate_samples(model: &HandMeshModel, store: &ParamStore, samples: &[Sample], batch: usize, pck: PckSpace) -> Result<EvalResult> {
    let preds = predict_samples(model, store, samples, batch)?;
    compute_metrics(&preds, samples, pck)
}

/// Evaluates `repeats` times. The first pass uses the samples as stored;
/// each further pass re-draws the geometric augmentation from its own seed.
pub fn evaluate(run: &LoadedRun, samples: &[Sample], repeats: usize, pck: PckSpace) -> Result<(MetricsSummary, Vec<EvalResult>)> {
    check_samples(samples, run.model.mesh.num_vertices, run.config.image_size)?;
    let mut aug = run.config.data.augment;
    aug.enabled = true;
    let mut results = Vec::with_capacity(repeats.max(1));
    for r in 0..repeats.max(1) {
        let set: Vec<Sample> = if r == 0 {
            samples.to_vec()
        } else {
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(run.config.seed ^ ((r as u64) << 32), i));
                    augment(s, &aug, &mut rng)
                })
                .collect()
        };
        results.push(evaluate_samples(&run.model, &run.store, &set, run.config.batch_size, pck)?);
    }
    let summary = MetricsSummary::from_runs(results.iter().map(|r| r.metrics).collect());
    Ok((summary, results))
}
