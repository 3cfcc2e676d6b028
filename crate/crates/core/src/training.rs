//! The two-stage training pipeline: freeze management, deterministic
//! batching, gradient accumulation, cosine scheduling, metrics logging,
//! and bit-exact checkpointing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::QRATriple;
use crate::error::{Error, Result};
use crate::model::{prepare, ModelBundle, ModelConfig, PlainTarget, PreparedSample, Stage1Source};
use crate::numerics::{AdamW, LrSchedule, ParamStore, Tape, Tensor};

/// Plan for one training stage. Freeze sets are derived from the stage:
/// stage 1 freezes the backbone and the vision encoder, stage 2 freezes
/// only the vision encoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlanConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub max_steps: u64,
}

impl Default for StagePlanConfig {
    fn default() -> Self {
        StagePlanConfig {
            epochs: 1,
            batch_size: 16,
            grad_accum: 1,
            lr_peak: 1e-4,
            lr_floor: 1e-6,
            max_steps: 5000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StagePlan {
    pub stage: u8,
    pub cfg: StagePlanConfig,
    pub seed: u64,
}

impl StagePlan {
    pub fn new(stage: u8, cfg: StagePlanConfig, seed: u64) -> Self {
        StagePlan { stage, cfg, seed }
    }

    fn schedule(&self, n_samples: usize) -> LrSchedule {
        let per_step = (self.cfg.batch_size * self.cfg.grad_accum).max(1);
        let steps_per_epoch = n_samples.div_ceil(per_step) as u64;
        let total = (steps_per_epoch * self.cfg.epochs as u64).clamp(1, self.cfg.max_steps);
        LrSchedule::new(self.cfg.lr_peak, self.cfg.lr_floor, total)
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub stage: u8,
    pub steps: u64,
    pub final_loss: f64,
    pub skipped_empty: usize,
    pub skipped_long: usize,
    pub trained_samples: usize,
}

/// What a stage trains on; internal to the loop.
enum Objective {
    Stage1(Stage1Source),
    Stage2,
    Plain(PlainTarget),
}

pub struct TrainOptions {
    pub metrics_path: Option<PathBuf>,
    pub optimizer: AdamW,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { metrics_path: None, optimizer: AdamW::default() }
    }
}

fn apply_freeze(bundle: &mut ModelBundle<f32>, stage: u8, use_embedder: bool) {
    let store = &mut bundle.store;
    store.set_all_frozen(false);
    store.set_frozen_prefix("vision.encoder", true);
    if stage == 1 {
        store.set_frozen_prefix("backbone.", true);
    }
    if !use_embedder {
        // no-embedder ablations train the backbone directly in both phases
        store.set_frozen_prefix("embedder.", true);
        store.set_frozen_prefix("tor_proj.", true);
        store.set_frozen_prefix("vision.adapter", true);
        store.set_frozen_prefix("backbone.", false);
    }
}

fn run_epochs(
    bundle: &mut ModelBundle<f32>,
    plan: &StagePlan,
    data: &[QRATriple],
    objective: Objective,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Pipeline(format!(
            "stage {} received an empty dataset",
            plan.stage
        )));
    }
    let mut report = TrainReport { stage: plan.stage, ..Default::default() };

    // tokenity and pre-filter once; skipped samples are logged, not fatal,
    // unless nothing survives
    let mut samples: Vec<PreparedSample> = Vec::with_capacity(data.len());
    for t in data {
        let s = prepare(t, plan.seed);
        let (len, body_empty) = match &objective {
            Objective::Stage1(source) => {
                let body = match source {
                    Stage1Source::Rationale => &s.rationale,
                    Stage1Source::Answer => &s.answer,
                };
                (bundle.stage1_len(&s, *source), body.is_empty())
            }
            Objective::Stage2 => (bundle.stage2_len(&s), s.answer.is_empty()),
            Objective::Plain(target) => {
                let body = match target {
                    PlainTarget::Rationale => &s.rationale,
                    PlainTarget::Answer => &s.answer,
                };
                (bundle.plain_len(&s, *target), body.is_empty())
            }
        };
        if body_empty {
            report.skipped_empty += 1;
            continue;
        }
        // truncation would sever the <tor>/segment correspondence, so
        // overlong samples are dropped instead
        if len > bundle.cfg.backbone.max_len {
            report.skipped_long += 1;
            continue;
        }
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(Error::Pipeline(format!(
            "stage {}: all {} samples were skipped ({} empty, {} over max_len)",
            plan.stage,
            data.len(),
            report.skipped_empty,
            report.skipped_long
        )));
    }
    report.trained_samples = samples.len();

    let schedule = plan.schedule(samples.len());
    let per_step = (plan.cfg.batch_size * plan.cfg.grad_accum).max(1);
    let mut metrics: Option<std::io::BufWriter<std::fs::File>> = match &opts.metrics_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            Some(std::io::BufWriter::new(std::fs::File::create(p)?))
        }
        None => None,
    };

    let mut step: u64 = 0;
    'epochs: for epoch in 0..plan.cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(plan.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(per_step) {
            if step >= schedule.total_steps || step >= plan.cfg.max_steps {
                break 'epochs;
            }
            let scale = 1.0 / chunk.len() as f32;
            let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            let mut loss_sum = 0.0f64;
            for &idx in chunk {
                let sample = &samples[idx];
                let mut tape = Tape::new();
                let loss = match &objective {
                    Objective::Stage1(source) => bundle.stage1_loss(&mut tape, sample, *source)?,
                    Objective::Stage2 => bundle.stage2_loss(&mut tape, sample)?,
                    Objective::Plain(target) => bundle.plain_loss(&mut tape, sample, *target)?,
                };
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Pipeline(format!(
                        "non-finite loss at step {step} on sample {}",
                        sample.id
                    )));
                }
                loss_sum += value as f64;
                tape.backward_seeded(loss, scale)?;
                tape.accumulate_param_grads(&mut grads);
            }
            let lr = schedule.lr(step.min(schedule.total_steps))?;
            opts.optimizer.step(&mut bundle.store, &grads, lr)?;
            let mean_loss = loss_sum / chunk.len() as f64;
            report.final_loss = mean_loss;
            step += 1;
            report.steps = step;
            if let Some(w) = metrics.as_mut() {
                writeln!(
                    w,
                    "{}",
                    serde_json::json!({
                        "step": step,
                        "lr": lr,
                        "loss": mean_loss,
                        "stage": plan.stage,
                    })
                )?;
            }
        }
    }
    if let Some(mut w) = metrics.take() {
        w.flush()?;
    }
    Ok(report)
}

/// Stage 1: embed planted rationales, train embedder + tor projector +
/// vision projector + vision adapter; backbone and vision encoder frozen.
pub fn train_stage1(
    bundle: &mut ModelBundle<f32>,
    plan: &StagePlan,
    data: &[QRATriple],
    source: Stage1Source,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    apply_freeze(bundle, 1, true);
    run_epochs(bundle, plan, data, Objective::Stage1(source), opts)
}

/// Stage 2: question + k consecutive `<tor>` into the embedder, answers
/// carry the loss; everything except the vision encoder trains.
pub fn train_stage2(
    bundle: &mut ModelBundle<f32>,
    plan: &StagePlan,
    data: &[QRATriple],
    init: &CheckpointMeta,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if init.stage != 1 {
        return Err(Error::contract(
            "train_stage2",
            format!("init checkpoint must come from stage 1, got stage {}", init.stage),
        ));
    }
    apply_freeze(bundle, 2, true);
    run_epochs(bundle, plan, data, Objective::Stage2, opts)
}

/// No-embedder training used by ablation baselines: the backbone learns
/// the body (rationale or answer) directly.
pub fn train_plain(
    bundle: &mut ModelBundle<f32>,
    plan: &StagePlan,
    data: &[QRATriple],
    target: PlainTarget,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    apply_freeze(bundle, plan.stage, false);
    run_epochs(bundle, plan, data, Objective::Plain(target), opts)
}

// ---------------------------------------------------------------- checkpoints

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub step: u64,
    pub seed: u64,
    pub vocab_hash: String,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

/// Write manifest.json plus one raw little-endian float32 blob per
/// parameter group, named by its dotted path.
pub fn save_checkpoint(
    bundle: &ModelBundle<f32>,
    dir: &Path,
    stage: u8,
    seed: u64,
) -> Result<CheckpointMeta> {
    std::fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    for (name, group) in bundle.store.iter() {
        let mut bytes = Vec::with_capacity(group.tensor.len() * 4);
        for v in group.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(format!("{name}.bin")), bytes)?;
        params.push(ParamEntry { name: name.clone(), shape: group.tensor.shape().to_vec() });
    }
    let meta = CheckpointMeta {
        stage,
        step: bundle.store.step,
        seed,
        vocab_hash: format!("{:016x}", crate::tokenizer::vocab_hash()),
        config: bundle.cfg,
        params,
    };
    let manifest = serde_json::to_string_pretty(&meta)?;
    std::fs::write(dir.join("manifest.json"), manifest)?;
    Ok(meta)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Checkpoint {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Load a checkpoint into a fresh bundle, verifying every blob against the
/// manifest. Round-trips are bit-exact.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelBundle<f32>, CheckpointMeta)> {
    let meta = read_manifest(dir)?;
    let want_hash = format!("{:016x}", crate::tokenizer::vocab_hash());
    if meta.vocab_hash != want_hash {
        return Err(Error::Checkpoint {
            path: dir.display().to_string(),
            detail: format!("vocab hash {} does not match {}", meta.vocab_hash, want_hash),
        });
    }
    let mut store = ParamStore::<f32>::new();
    store.step = meta.step;
    for entry in &meta.params {
        let path = dir.join(format!("{}.bin", entry.name));
        let bytes = std::fs::read(&path).map_err(|e| Error::Checkpoint {
            path: entry.name.clone(),
            detail: format!("missing blob: {e}"),
        })?;
        let expected: usize = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::Checkpoint {
                path: entry.name.clone(),
                detail: format!("blob holds {} bytes, manifest shape {:?} needs {expected}", bytes.len(), entry.shape),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?);
    }
    // restore the permanent freeze on the encoder; stage freezes are
    // reapplied by whichever training entry point runs next
    store.set_frozen_prefix("vision.encoder", true);
    let bundle = ModelBundle::from_store(meta.config, store)?;
    Ok((bundle, meta))
}

#[cfg(test)]
mod tests;
