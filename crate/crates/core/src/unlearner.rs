//! Training pipelines: pretraining, LoRA finetuning and the unlearning loop,
//! with periodic checkpoints, a JSON-lines metrics stream and resume.
//!
//! All randomness of step `s` is derived from `(seed, s)`, so a run resumed
//! from the checkpoint written after step `k` replays steps `k+1..` exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, build_random_pool, BatchStream, ForgetSet, NormalSet, PromptPair, RandomPool};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, OPT_PREFIX};
use crate::model::{merge_lora, LoraAdapters, ModelParams};
use crate::objectives::{
    objective_gradients, unlearn_step, Job, KlMode, LossBreakdown, Term, Trainable, UnlearnBatch, UnlearnOptions,
    UnlearnState,
};
use crate::optimizer::{clip_global_norm, global_norm, Optimizer, OptimizerKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Pretrain,
    Finetune,
    Unlearn,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Pretrain => "pretrain",
            Pipeline::Finetune => "finetune",
            Pipeline::Unlearn => "unlearn",
        }
    }

    /// Tag written into the final checkpoint.
    pub fn tag(self) -> &'static str {
        match self {
            Pipeline::Pretrain => "pretrained",
            Pipeline::Finetune => "finetuned",
            Pipeline::Unlearn => "unlearned",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Pipeline::Pretrain),
            "finetune" => Ok(Pipeline::Finetune),
            "unlearn" => Ok(Pipeline::Unlearn),
            _ => Err(Error::Checkpoint(format!("unknown pipeline {s:?}"))),
        }
    }
}

/// Loop settings shared by all pipelines. `lr`, `optimizer` and `clip_norm`
/// drive the descent pipelines; unlearning takes them from [`UnlearnOptions`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    #[serde(with = "crate::optimizer::clip_serde")]
    pub clip_norm: Option<f64>,
    /// Normal-set responses placed in the random pool.
    pub pool_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            iterations: 1000,
            batch_size: 2,
            checkpoint_every: 100,
            seed: 0,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            clip_norm: Some(1.0),
            pool_size: 64,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.iterations == 0 {
            problems.push("run.iterations must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("run.batch_size must be at least 1".to_string());
        }
        if self.checkpoint_every == 0 {
            problems.push("run.checkpoint_every must be at least 1".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("run.lr must be positive, got {}", self.lr));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                problems.push(format!("run.clip_norm must be positive, got {c}"));
            }
        }
        if self.pool_size == 0 {
            problems.push("run.pool_size must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// One metrics line of a descent pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmRecord {
    pub step: usize,
    /// Summed cross-entropy divided by batch size.
    pub loss: f64,
    pub per_token: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepRecord {
    Unlearn(LossBreakdown),
    Lm(LmRecord),
}

impl StepRecord {
    pub fn step(&self) -> usize {
        match self {
            StepRecord::Unlearn(b) => b.step,
            StepRecord::Lm(r) => r.step,
        }
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub pipeline: Pipeline,
    /// Parameters, optimizer, step counter and divergence-guard flag.
    pub core: UnlearnState<f32>,
    /// Present when finetuning: the only trained tensors.
    pub adapters: Option<LoraAdapters<f32>>,
    /// Fingerprint of the frozen base (finetune) or the reference (unlearn).
    pub anchor: Option<String>,
}

impl TrainState {
    pub fn new(pipeline: Pipeline, params: ModelParams<f32>, optimizer: Optimizer<f32>) -> Self {
        TrainState {
            pipeline,
            core: UnlearnState {
                params,
                optimizer,
                guard_tripped: false,
                step: 0,
            },
            adapters: None,
            anchor: None,
        }
    }

    pub fn step(&self) -> usize {
        self.core.step
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.core.params
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let opt = &self.core.optimizer;
        let mut ck = Checkpoint::from_model(&self.core.params)
            .with_header("pipeline", self.pipeline.as_str())
            .with_header("step", self.core.step)
            .with_header("guard_tripped", self.core.guard_tripped)
            .with_header("opt.kind", serde_json::to_string(&opt.kind).expect("serialisable"))
            .with_header("opt.lr", format!("{:?}", opt.lr))
            .with_header("opt.t", opt.t);
        if let Some(a) = &self.anchor {
            ck = ck.with_header("anchor", a);
        }
        if let Some(ad) = &self.adapters {
            ck.add_adapters(ad);
        }
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            ck.add_tensor(format!("{OPT_PREFIX}m.{i}"), &Tensor::new(vec![m.len()], m.clone()).expect("non-empty"));
            ck.add_tensor(format!("{OPT_PREFIX}v.{i}"), &Tensor::new(vec![v.len()], v.clone()).expect("non-empty"));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let pipeline = Pipeline::parse(ck.get("pipeline").unwrap_or("pretrain"))?;
        let kind: OptimizerKind = serde_json::from_str(
            ck.get("opt.kind")
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad opt.kind: {e}")))?;
        let mut optimizer = Optimizer::new(kind, ck.parse("opt.lr")?);
        optimizer.t = ck.parse("opt.t")?;
        for i in 0.. {
            let (Some(m), Some(v)) = (ck.tensor(&format!("{OPT_PREFIX}m.{i}")), ck.tensor(&format!("{OPT_PREFIX}v.{i}")))
            else {
                break;
            };
            optimizer.m.push(m.data().to_vec());
            optimizer.v.push(v.data().to_vec());
        }
        Ok(TrainState {
            pipeline,
            core: UnlearnState {
                params: ck.model()?,
                optimizer,
                guard_tripped: ck.parse("guard_tripped")?,
                step: ck.parse("step")?,
            },
            adapters: ck.adapters()?,
            anchor: ck.get("anchor").map(str::to_string),
        })
    }
}

/// Output directory layout: `checkpoints/`, `metrics.jsonl`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step-{step:06}.ulrn"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.ulrn")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    /// Opens the metrics stream, keeping only records up to `keep_through`.
    fn open_metrics(&self, keep_through: usize) -> Result<BufWriter<fs::File>> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(format!("creating {}", self.root.display()), e))?;
        let path = self.metrics();
        let mut kept = String::new();
        if keep_through > 0 {
            if let Ok(text) = fs::read_to_string(&path) {
                for line in text.lines() {
                    let step = serde_json::from_str::<serde_json::Value>(line)
                        .ok()
                        .and_then(|v| v.get("step").and_then(|s| s.as_u64()));
                    if step.is_some_and(|s| s as usize <= keep_through) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(BufWriter::new(file))
    }
}

/// Runs `step_fn` until `iterations` steps are done, streaming metrics and
/// writing checkpoints. A failing step leaves the last checkpoint in place.
fn drive(
    state: &mut TrainState,
    cfg: &RunConfig,
    dir: &RunDir,
    observer: &mut dyn FnMut(&StepRecord),
    mut step_fn: impl FnMut(&mut TrainState) -> Result<StepRecord>,
) -> Result<PathBuf> {
    let mut metrics = dir.open_metrics(state.step())?;
    let metrics_err = |e| Error::io(format!("writing {}", dir.metrics().display()), e);
    while state.step() < cfg.iterations {
        let record = match step_fn(state) {
            Ok(r) => r,
            Err(e) => {
                metrics.flush().map_err(metrics_err)?;
                return Err(e);
            }
        };
        writeln!(metrics, "{}", serde_json::to_string(&record).expect("serialisable")).map_err(metrics_err)?;
        observer(&record);
        if state.step().is_multiple_of(cfg.checkpoint_every) && state.step() < cfg.iterations {
            metrics.flush().map_err(metrics_err)?;
            state.to_checkpoint().save(&dir.checkpoint(state.step()))?;
        }
    }
    metrics.flush().map_err(metrics_err)?;
    let path = dir.final_checkpoint();
    state
        .to_checkpoint()
        .with_header("tag", state.pipeline.tag())
        .save(&path)?;
    Ok(path)
}

fn lm_step(state: &mut TrainState, data: &[PromptPair], stream: &BatchStream, clip: Option<f64>) -> Result<StepRecord> {
    let idx = stream.at(state.step());
    let b = idx.len() as f64;
    let jobs: Vec<Job> = idx
        .iter()
        .map(|&i| Job {
            term: Term::Lm,
            prompt: &data[i].prompt,
            response: &data[i].response,
            norm: 1.0 / b,
        })
        .collect();
    let coefs: Vec<f64> = jobs.iter().map(|j| j.norm).collect();
    let target = match &state.adapters {
        Some(a) => Trainable::lora(&state.core.params, a),
        None => Trainable::full(&state.core.params),
    };
    let step = state.step() + 1;
    let (values, mut grads) = objective_gradients(target, None, &jobs, &coefs, KlMode::Distribution)
        .map_err(|e| Error::Diverged { step, reason: e.to_string() })?;
    let total: f64 = values.iter().sum();
    let tokens: usize = idx.iter().map(|&i| data[i].len() - 1).sum();
    let grad_norm = match clip {
        Some(c) => clip_global_norm(&mut grads, c),
        None => global_norm(&grads),
    };
    let core = &mut state.core;
    let applied = match &mut state.adapters {
        Some(a) => core.optimizer.step(a.tensors_mut(), &grads),
        None => core.optimizer.step(core.params.tensors_mut().iter_mut(), &grads),
    };
    applied.map_err(|e| Error::Diverged { step, reason: e.to_string() })?;
    core.step = step;
    Ok(StepRecord::Lm(LmRecord {
        step,
        loss: total / b,
        per_token: total / tokens as f64,
        grad_norm,
    }))
}

fn ensure_pipeline(state: &TrainState, expected: Pipeline) -> Result<()> {
    if state.pipeline != expected {
        return Err(Error::Contract(format!(
            "cannot resume a {} run as {}",
            state.pipeline.as_str(),
            expected.as_str()
        )));
    }
    Ok(())
}

/// Fresh state for pretraining `params`.
pub fn pretrain_state(params: ModelParams<f32>, cfg: &RunConfig) -> TrainState {
    TrainState::new(Pipeline::Pretrain, params, Optimizer::new(cfg.optimizer, cfg.lr))
}

/// Next-token descent on `data`, all weights trainable.
pub fn run_pretrain(
    state: &mut TrainState,
    data: &[PromptPair],
    cfg: &RunConfig,
    dir: &RunDir,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_pipeline(state, Pipeline::Pretrain)?;
    let stream = batch_iter(data.len(), cfg.batch_size, cfg.seed)?;
    drive(state, cfg, dir, observer, |s| lm_step(s, data, &stream, cfg.clip_norm))
}

/// Fresh finetuning state: adapters attached to a frozen base.
pub fn finetune_state(base: ModelParams<f32>, adapters: LoraAdapters<f32>, cfg: &RunConfig) -> TrainState {
    let mut s = TrainState::new(Pipeline::Finetune, base, Optimizer::new(cfg.optimizer, cfg.lr));
    s.anchor = Some(s.core.params.fingerprint());
    s.adapters = Some(adapters);
    s
}

/// Trains only the adapters; the base fingerprint is checked after every step.
pub fn run_finetune_lora(
    state: &mut TrainState,
    data: &[PromptPair],
    cfg: &RunConfig,
    dir: &RunDir,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_pipeline(state, Pipeline::Finetune)?;
    if state.adapters.is_none() {
        return Err(Error::Contract("finetuning needs adapters".into()));
    }
    let anchor = state
        .anchor
        .clone()
        .ok_or_else(|| Error::Contract("finetune state lacks the base fingerprint".into()))?;
    let stream = batch_iter(data.len(), cfg.batch_size, cfg.seed)?;
    drive(state, cfg, dir, observer, |s| {
        let r = lm_step(s, data, &stream, cfg.clip_norm)?;
        if s.core.params.fingerprint() != anchor {
            return Err(Error::Contract("base weights changed during finetuning".into()));
        }
        Ok(r)
    })
}

/// Frozen copy of the parameters at the start of unlearning.
#[derive(Clone, Debug)]
pub struct FrozenReference {
    params: ModelParams<f32>,
    fingerprint: String,
}

impl FrozenReference {
    pub fn capture(params: &ModelParams<f32>) -> Self {
        FrozenReference {
            params: params.clone(),
            fingerprint: params.fingerprint(),
        }
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Weights unlearning starts from: adapters (if any) merged into the base.
pub fn start_params(ck: &Checkpoint) -> Result<ModelParams<f32>> {
    let base = ck.model()?;
    match ck.adapters()? {
        Some(a) => merge_lora(&base, &a),
        None => Ok(base),
    }
}

/// Fresh unlearning state at the reference weights.
pub fn unlearn_state(reference: &FrozenReference, options: &UnlearnOptions) -> TrainState {
    let mut s = TrainState::new(
        Pipeline::Unlearn,
        reference.params.clone(),
        Optimizer::new(options.optimizer, options.weights.lr),
    );
    s.anchor = Some(reference.fingerprint.clone());
    s
}

/// Data of the unlearning loop.
pub struct UnlearnData<'a> {
    pub forget: &'a ForgetSet,
    pub normal: &'a NormalSet,
    pub pool: RandomPool,
}

impl<'a> UnlearnData<'a> {
    pub fn new(forget: &'a ForgetSet, normal: &'a NormalSet, cfg: &RunConfig, options: &UnlearnOptions) -> Result<Self> {
        let mut pool = build_random_pool(normal, cfg.seed, cfg.pool_size)?;
        pool.sample_size = options.random_samples.max(1);
        Ok(UnlearnData { forget, normal, pool })
    }
}

/// The batch unlearning step `step` (0-based) sees.
pub fn unlearn_batch<'a>(
    data: &'a UnlearnData<'_>,
    forget_stream: &BatchStream,
    normal_stream: &BatchStream,
    seed: u64,
    step: usize,
) -> UnlearnBatch<'a> {
    let forget: Vec<&PromptPair> = forget_stream
        .at(step)
        .into_iter()
        .map(|i| &data.forget.records()[i])
        .collect();
    let normal = normal_stream
        .at(step)
        .into_iter()
        .map(|i| &data.normal.records()[i])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6e64);
    rng.set_stream(step as u64);
    let random = forget.iter().map(|_| data.pool.sample(&mut rng)).collect();
    UnlearnBatch { forget, random, normal }
}

/// Iterates [`unlearn_step`] with fresh forget and normal batches each step.
pub fn run_unlearn(
    state: &mut TrainState,
    reference: &FrozenReference,
    data: &UnlearnData<'_>,
    cfg: &RunConfig,
    options: &UnlearnOptions,
    dir: &RunDir,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<PathBuf> {
    cfg.validate()?;
    options.weights.validate()?;
    ensure_pipeline(state, Pipeline::Unlearn)?;
    if state.anchor.as_deref() != Some(reference.fingerprint()) {
        return Err(Error::Contract(
            "state was not started from this reference checkpoint".into(),
        ));
    }
    let forget_stream = batch_iter(data.forget.len(), cfg.batch_size, cfg.seed)?;
    let normal_stream = batch_iter(data.normal.len(), cfg.batch_size, cfg.seed.wrapping_add(1))?;
    drive(state, cfg, dir, observer, |s| {
        let batch = unlearn_batch(data, &forget_stream, &normal_stream, cfg.seed, s.step());
        let b = unlearn_step(&mut s.core, reference.params(), &batch, options)?;
        Ok(StepRecord::Unlearn(b))
    })
}

/// Reads a metrics stream back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
