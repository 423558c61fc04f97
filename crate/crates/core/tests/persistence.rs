use std::fs;

use ulrn_core::data::synth::{make_synthetic_corpora, SynthConfig};
use ulrn_core::data::{ForgetSet, NormalSet, PromptPair};
use ulrn_core::model::checkpoint::Checkpoint;
use ulrn_core::model::{init, LoraAdapters, LoraConfig, ModelConfig};
use ulrn_core::objectives::{LossWeights, UnlearnOptions};
use ulrn_core::optimizer::OptimizerKind;
use ulrn_core::unlearner::{
    finetune_state, pretrain_state, read_metrics, run_finetune_lora, run_pretrain, run_unlearn, unlearn_state,
    FrozenReference, Pipeline, RunConfig, RunDir, StepRecord, TrainState, UnlearnData,
};

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        context_len: 96,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn corpora() -> (ForgetSet, NormalSet) {
    let c = make_synthetic_corpora(0, &SynthConfig::default());
    (c.forget_set(tiny().context_len).unwrap(), c.normal_set(tiny().context_len).unwrap())
}

fn options(kind: OptimizerKind) -> UnlearnOptions {
    UnlearnOptions {
        optimizer: kind,
        weights: LossWeights {
            lr: 1e-3,
            ..LossWeights::default()
        },
        random_samples: 2,
        ..UnlearnOptions::default()
    }
}

fn cfg(iterations: usize) -> RunConfig {
    RunConfig {
        iterations,
        batch_size: 2,
        checkpoint_every: 3,
        pool_size: 8,
        ..RunConfig::default()
    }
}

/// Runs unlearning from a fresh tiny model and returns the final checkpoint bytes.
fn unlearn_run(dir: &RunDir, kind: OptimizerKind, iterations: usize) -> Vec<u8> {
    let (f, n) = corpora();
    let reference = FrozenReference::capture(&init(&tiny()).unwrap());
    let opts = options(kind);
    let mut st = unlearn_state(&reference, &opts);
    let data = UnlearnData::new(&f, &n, &cfg(iterations), &opts).unwrap();
    let path = run_unlearn(&mut st, &reference, &data, &cfg(iterations), &opts, dir, &mut |_| {}).unwrap();
    fs::read(path).unwrap()
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let params = init::<f32>(&tiny()).unwrap();
    let ad = LoraAdapters::init(&params, &LoraConfig::default()).unwrap();
    let mut st = finetune_state(params, ad, &RunConfig::default());
    st.core.optimizer.t = 4;
    let first = dir.path().join("a.ulrn");
    let second = dir.path().join("b.ulrn");
    st.to_checkpoint().save(&first).unwrap();
    let back = TrainState::from_checkpoint(&Checkpoint::load(&first).unwrap()).unwrap();
    back.to_checkpoint().save(&second).unwrap();
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
}

#[test]
fn unlearning_is_bitwise_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (RunDir::new(a.path()), RunDir::new(b.path()));
    assert_eq!(unlearn_run(&ra, OptimizerKind::Plain, 4), unlearn_run(&rb, OptimizerKind::Plain, 4));
    assert_eq!(fs::read(ra.metrics()).unwrap(), fs::read(rb.metrics()).unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let x = one.install(|| unlearn_run(&RunDir::new(a.path()), OptimizerKind::Adam, 3));
    let y = three.install(|| unlearn_run(&RunDir::new(b.path()), OptimizerKind::Adam, 3));
    assert_eq!(x, y);
}

#[test]
fn resumed_unlearning_matches_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full_dir = RunDir::new(a.path());
    let full = unlearn_run(&full_dir, OptimizerKind::Adam, 6);

    let (f, n) = corpora();
    let reference = FrozenReference::capture(&init(&tiny()).unwrap());
    let opts = options(OptimizerKind::Adam);
    let mut st = TrainState::from_checkpoint(&Checkpoint::load(&full_dir.checkpoint(3)).unwrap()).unwrap();
    assert_eq!(st.step(), 3);
    let data = UnlearnData::new(&f, &n, &cfg(6), &opts).unwrap();
    let resumed_dir = RunDir::new(b.path());
    let path = run_unlearn(&mut st, &reference, &data, &cfg(6), &opts, &resumed_dir, &mut |_| {}).unwrap();
    assert_eq!(fs::read(path).unwrap(), full);

    let whole = read_metrics(&full_dir.metrics()).unwrap();
    let tail = read_metrics(&resumed_dir.metrics()).unwrap();
    assert_eq!(tail.as_slice(), &whole[3..]);
}

#[test]
fn lora_finetuning_leaves_base_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let (_, n) = corpora();
    let base = init::<f32>(&tiny()).unwrap();
    let lora = LoraConfig {
        rank: 2,
        ..LoraConfig::default()
    };
    let ad = LoraAdapters::init(&base, &lora).unwrap();
    let run_cfg = RunConfig {
        iterations: 5,
        lr: 1e-2,
        ..cfg(5)
    };
    let mut st = finetune_state(base.clone(), ad.clone(), &run_cfg);
    let path = run_finetune_lora(&mut st, n.records(), &run_cfg, &RunDir::new(dir.path()), &mut |_| {}).unwrap();
    let back = TrainState::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.pipeline, Pipeline::Finetune);
    assert_eq!(back.core.params, base);
    assert_ne!(back.adapters.unwrap(), ad);
}

#[test]
fn pretraining_lowers_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (f, n) = corpora();
    let data: Vec<PromptPair> = f.records().iter().chain(n.records()).take(8).cloned().collect();
    let run_cfg = RunConfig {
        iterations: 60,
        batch_size: 4,
        checkpoint_every: 1000,
        lr: 1e-2,
        ..RunConfig::default()
    };
    let mut st = pretrain_state(init(&tiny()).unwrap(), &run_cfg);
    let mut losses = Vec::new();
    run_pretrain(&mut st, &data, &run_cfg, &RunDir::new(dir.path()), &mut |r| {
        if let StepRecord::Lm(l) = r {
            losses.push(l.per_token);
        }
    })
    .unwrap();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.7 * head, "per-token loss {head} -> {tail}");
}
