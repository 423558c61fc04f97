//! End-to-end acceptance run: prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Criteria 4 and 5 train real models and take
//! several minutes each.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulrn_core::autodiff::{default_step, grad_check};
use ulrn_core::data::synth::{make_synthetic_corpora, SynthConfig, SyntheticCorpora};
use ulrn_core::data::{ForgetSet, NormalSet, PromptPair};
use ulrn_core::evaluator::bleu::{corpus_bleu, MAX_N};
use ulrn_core::evaluator::{effectiveness, evaluate, train_classifier, EvalSettings, Report};
use ulrn_core::model::checkpoint::Checkpoint;
use ulrn_core::model::{forward, init, merge_lora, LoraAdapters, LoraConfig, ModelConfig, ModelParams};
use ulrn_core::objectives::{
    kl_divergence, params_as_point, sequence_loss, uniform_cross_entropy, unlearn_step, KlMode, LossWeights,
    ObjectiveFn, Term, UnlearnBatch, UnlearnOptions, UnlearnState,
};
use ulrn_core::optimizer::OptimizerKind;
use ulrn_core::unlearner::{
    finetune_state, pretrain_state, read_metrics, run_finetune_lora, run_pretrain, run_unlearn, unlearn_state,
    FrozenReference, RunConfig, RunDir, TrainState, UnlearnData,
};
use ulrn_core::Scalar;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_len: 16,
        seed,
        ..ModelConfig::default()
    }
}

fn random_pair(rng: &mut ChaCha8Rng) -> PromptPair {
    let mut toks = |n: usize| (0..n).map(|_| rng.random_range(97..123usize)).collect::<Vec<_>>();
    PromptPair {
        prompt: toks(3),
        response: toks(3),
    }
}

fn weighted_coefs(batch: &UnlearnBatch<'_>, w: &LossWeights) -> Vec<f64> {
    batch
        .jobs(true)
        .iter()
        .map(|j| {
            j.norm
                * match j.term {
                    Term::Forget => w.eps1,
                    Term::Random => w.eps2,
                    _ => w.eps3,
                }
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let forget: Vec<PromptPair> = (0..2).map(|_| random_pair(&mut rng)).collect();
    let normal: Vec<PromptPair> = (0..2).map(|_| random_pair(&mut rng)).collect();
    let pool: Vec<Vec<usize>> = (0..2).map(|_| random_pair(&mut rng).response).collect();
    let batch = UnlearnBatch {
        forget: forget.iter().collect(),
        random: forget.iter().map(|_| pool.iter().map(Vec::as_slice).collect()).collect(),
        normal: normal.iter().collect(),
    };
    let reference = init::<f64>(&tiny(1)).unwrap();
    let f = ObjectiveFn {
        config: tiny(0),
        coefs: weighted_coefs(&batch, &LossWeights::default()),
        jobs: batch.jobs(true),
        reference: Some(reference),
        kl_mode: KlMode::Distribution,
    };
    let p64 = init::<f64>(&tiny(0)).unwrap();
    let p32: ModelParams<f32> = p64.cast();
    let e64 = grad_check(&f, &params_as_point(&p64), default_step::<f64>()).unwrap();
    let e32 = grad_check(&f, &params_as_point(&p32), default_step::<f32>()).unwrap();
    let secs = started.elapsed().as_secs_f64();
    check(
        e32 <= 1e-3 && e64 <= 1e-6 && secs < 60.0,
        format!("rel err f32 {e32:.2e} (≤1e-3), f64 {e64:.2e} (≤1e-6), {secs:.1}s"),
    )
}

fn criterion_2() -> Outcome {
    // All-zero weights give all-zero logits.
    let mut zero = init::<f64>(&tiny(0)).unwrap();
    for t in zero.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let response = [104, 105, 33];
    let ce = sequence_loss(&zero, &[97, 98], &response).unwrap() / response.len() as f64;
    let ce_gap = (ce - uniform_cross_entropy()).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p: Vec<f64> = (0..259).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = p.iter().sum();
    let p: Vec<f64> = p.iter().map(|v| v / s).collect();
    let kl_self = kl_divergence(&p, &p).abs();

    let params = init::<f32>(&tiny(0)).unwrap();
    let forget: Vec<PromptPair> = (0..2).map(|_| random_pair(&mut rng)).collect();
    let normal: Vec<PromptPair> = (0..2).map(|_| random_pair(&mut rng)).collect();
    let batch = UnlearnBatch {
        forget: forget.iter().collect(),
        random: normal.iter().map(|r| vec![r.response.as_slice()]).collect(),
        normal: normal.iter().collect(),
    };
    let options = UnlearnOptions::default();
    let mut state = UnlearnState::new(params.clone(), &options);
    let l_nor = unlearn_step(&mut state, &params, &batch, &options).unwrap().l_nor.abs();

    let mut eq1 = 0.0f64;
    for _ in 0..1000 {
        let a: f64 = rng.random_range(1e-3..=1.0);
        let u: f64 = rng.random_range(0.0..=1.0);
        let e = effectiveness(a, u).unwrap();
        eq1 = eq1.max((e - 100.0 * (a - u) / a).abs());
    }
    check(
        ce_gap <= 1e-3 && kl_self <= 1e-6 && l_nor <= 1e-6 && eq1 <= 1e-9,
        format!("|CE−ln259| {ce_gap:.1e}, KL(p‖p) {kl_self:.1e}, first l_nor {l_nor:.1e}, effectiveness max err {eq1:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let weights = LossWeights {
        eps1: 1.0,
        eps2: 0.0,
        eps3: 0.0,
        lr: 1e-3,
    };
    let options = UnlearnOptions {
        weights,
        optimizer: OptimizerKind::Plain,
        clip_norm: None,
        divergence_guard: false,
        ..UnlearnOptions::default()
    };
    let mut violations = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let forget: Vec<PromptPair> = (0..2).map(|_| random_pair(&mut rng)).collect();
        let normal: Vec<PromptPair> = (0..2).map(|_| random_pair(&mut rng)).collect();
        let batch = UnlearnBatch {
            forget: forget.iter().collect(),
            random: normal.iter().map(|r| vec![r.response.as_slice()]).collect(),
            normal: normal.iter().collect(),
        };
        let params = init::<f32>(&tiny(seed)).unwrap();
        let forget_ce = |p: &ModelParams<f32>| -> f64 {
            forget.iter().map(|r| sequence_loss(p, &r.prompt, &r.response).unwrap()).sum()
        };
        let mut state = UnlearnState::new(params.clone(), &options);
        let mut prev = forget_ce(&state.params);
        for step in 1..=10 {
            unlearn_step(&mut state, &params, &batch, &options).unwrap();
            let now = forget_ce(&state.params);
            if now < prev {
                violations.push(format!("seed {seed} step {step}: {prev} -> {now}"));
            }
            prev = now;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        violations.is_empty() && secs < 120.0,
        format!("20 seeds × 10 steps, {} decreases {:?}, {secs:.1}s", violations.len(), violations.first()),
    )
}

struct Setup {
    corpora: SyntheticCorpora,
    forget: ForgetSet,
    normal: NormalSet,
    dir: tempfile::TempDir,
}

fn setup() -> Setup {
    let corpora = make_synthetic_corpora(0, &SynthConfig::default());
    let ctx = ModelConfig::default().context_len;
    Setup {
        forget: corpora.forget_set(ctx).unwrap(),
        normal: corpora.normal_set(ctx).unwrap(),
        corpora,
        dir: tempfile::tempdir().unwrap(),
    }
}

fn pretrain(s: &Setup, data: &[PromptPair]) -> ModelParams<f32> {
    let cfg = RunConfig {
        iterations: 500,
        batch_size: 8,
        lr: 1e-3,
        optimizer: OptimizerKind::Adam,
        ..RunConfig::default()
    };
    let mut st = pretrain_state(init(&ModelConfig::default()).unwrap(), &cfg);
    run_pretrain(&mut st, data, &cfg, &RunDir::new(s.dir.path().join("pretrain")), &mut |_| {}).unwrap();
    st.params().clone()
}

fn unlearn(s: &Setup, start: &ModelParams<f32>) -> ModelParams<f32> {
    let options = UnlearnOptions {
        optimizer: OptimizerKind::Adam,
        ..UnlearnOptions::default()
    };
    let cfg = RunConfig {
        iterations: 1000,
        batch_size: 2,
        ..RunConfig::default()
    };
    let reference = FrozenReference::capture(start);
    let data = UnlearnData::new(&s.forget, &s.normal, &cfg, &options).unwrap();
    let mut st = unlearn_state(&reference, &options);
    let dir = RunDir::new(s.dir.path().join("unlearn"));
    run_unlearn(&mut st, &reference, &data, &cfg, &options, &dir, &mut |_| {}).unwrap();
    assert_eq!(read_metrics(&dir.metrics()).unwrap().len(), 1000);
    st.params().clone()
}

fn row<'a>(report: &'a Report, name: &str) -> &'a ulrn_core::evaluator::EvalReport {
    report.rows.iter().find(|r| r.model == name).unwrap()
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let s = setup();
    let both: Vec<PromptPair> = s.forget.records().iter().chain(s.normal.records()).cloned().collect();
    let original = pretrain(&s, &both);
    eprintln!("  pretrained in {:.0}s", started.elapsed().as_secs_f64());
    let classifier = train_classifier(&s.corpora.labeled, 5, 0).unwrap();
    let unlearned = unlearn(&s, &original);
    eprintln!("  unlearned at {:.0}s", started.elapsed().as_secs_f64());
    let models = vec![("original".to_string(), original), ("unlearned".to_string(), unlearned)];
    let (report, _) = evaluate(
        &models,
        s.forget.records(),
        s.normal.records(),
        &classifier,
        &EvalSettings::default(),
        Some("original"),
    )
    .unwrap();
    let (before, after) = (row(&report, "original"), row(&report, "unlearned"));
    let drop = 1.0 - after.harmful_rate / before.harmful_rate;
    let e = after.effectiveness_e.unwrap_or(f64::NAN);
    let ppl_rise = after.ppl_normal / before.ppl_normal - 1.0;
    let secs = started.elapsed().as_secs_f64();
    check(
        classifier.accuracy >= 0.95 && drop >= 0.5 && e >= 50.0 && ppl_rise <= 0.2,
        format!(
            "classifier acc {:.3}, harmful rate {:.2} -> {:.2} (drop {:.0}%), E {e:.1}%, normal ppl {:.3} -> {:.3} ({:+.1}%), {secs:.0}s",
            classifier.accuracy,
            before.harmful_rate,
            after.harmful_rate,
            100.0 * drop,
            before.ppl_normal,
            after.ppl_normal,
            100.0 * ppl_rise
        ),
    )
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let s = setup();
    let base = pretrain(&s, s.normal.records());
    let lora = LoraConfig {
        rank: 8,
        alpha: 16.0,
        targets: ["q", "k", "v", "o", "mlp_in", "mlp_out"].map(String::from).to_vec(),
        ..LoraConfig::default()
    };
    let cfg = RunConfig {
        iterations: 300,
        batch_size: 16,
        lr: 5e-3,
        optimizer: OptimizerKind::Adam,
        ..RunConfig::default()
    };
    let mut st = finetune_state(base.clone(), LoraAdapters::init(&base, &lora).unwrap(), &cfg);
    run_finetune_lora(&mut st, s.forget.records(), &cfg, &RunDir::new(s.dir.path().join("finetune")), &mut |_| {})
        .unwrap();
    let finetuned = merge_lora(&base, st.adapters.as_ref().unwrap()).unwrap();
    eprintln!("  pretrained and finetuned in {:.0}s", started.elapsed().as_secs_f64());
    let unlearned = unlearn(&s, &finetuned);
    eprintln!("  unlearned at {:.0}s", started.elapsed().as_secs_f64());
    let classifier = train_classifier(&s.corpora.labeled, 5, 0).unwrap();
    let models = vec![
        ("original".to_string(), base),
        ("finetuned".to_string(), finetuned),
        ("unlearned".to_string(), unlearned),
    ];
    let (report, _) =
        evaluate(&models, s.forget.records(), s.normal.records(), &classifier, &EvalSettings::default(), None).unwrap();
    let (o, f, u) = (row(&report, "original"), row(&report, "finetuned"), row(&report, "unlearned"));
    let secs = started.elapsed().as_secs_f64();
    check(
        f.bleu_forget - o.bleu_forget >= 0.2
            && u.bleu_forget < 0.5 * f.bleu_forget
            && (u.bleu_normal - f.bleu_normal).abs() <= 0.1,
        format!(
            "bleu_forget {:.4} -> {:.4} -> {:.4}, bleu_normal {:.4} -> {:.4} -> {:.4}, {secs:.0}s",
            o.bleu_forget, f.bleu_forget, u.bleu_forget, o.bleu_normal, f.bleu_normal, u.bleu_normal
        ),
    )
}

fn max_gap<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

fn criterion_6() -> Outcome {
    let config = ModelConfig {
        d_model: 16,
        context_len: 64,
        ..tiny(4)
    };
    let params = init::<f32>(&config).unwrap();
    let lora = LoraConfig {
        targets: ["q", "k", "v", "o", "mlp_in", "mlp_out"].map(String::from).to_vec(),
        ..LoraConfig::default()
    };
    let fresh = LoraAdapters::init(&params, &lora).unwrap();
    let toks = [257, 104, 105, 32, 116, 104, 101, 114, 101];
    let plain = forward(&params, &toks, None).unwrap();
    let identity = max_gap(plain.data(), forward(&params, &toks, Some(&fresh)).unwrap().data());

    let mut trained = fresh.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in trained.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    let merged = merge_lora(&params, &trained).unwrap();
    let merge_gap = max_gap(
        forward(&params, &toks, Some(&trained)).unwrap().data(),
        forward(&merged, &toks, None).unwrap().data(),
    );

    let s = setup();
    let records: Vec<PromptPair> = s
        .forget
        .records()
        .iter()
        .map(|r| PromptPair::from_text(&r.prompt_text(), &r.response_text(), config.context_len).0)
        .collect();
    let cfg = RunConfig {
        iterations: 100,
        batch_size: 4,
        checkpoint_every: 25,
        lr: 1e-2,
        ..RunConfig::default()
    };
    let before = params.fingerprint();
    let mut st = finetune_state(params.clone(), fresh.clone(), &cfg);
    let path = run_finetune_lora(&mut st, &records, &cfg, &RunDir::new(s.dir.path()), &mut |_| {}).unwrap();
    let saved = TrainState::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let frozen = saved.core.params.fingerprint() == before && st.core.params.fingerprint() == before;
    let adapters_moved = saved.adapters.as_ref() != Some(&fresh);
    check(
        identity == 0.0 && merge_gap <= 1e-5 && frozen && adapters_moved,
        format!(
            "zero-init max|Δlogit| {identity:e}, merge/attach {merge_gap:.1e} (≤1e-5), base hash unchanged over 100 steps: {frozen}"
        ),
    )
}

fn criterion_7() -> Outcome {
    let s = setup();
    let config = ModelConfig {
        d_model: 16,
        context_len: 96,
        ..tiny(7)
    };
    let shrink = |set: &[PromptPair]| -> Vec<PromptPair> {
        set.iter()
            .map(|r| PromptPair::from_text(&r.prompt_text(), &r.response_text(), config.context_len).0)
            .collect()
    };
    let forget = ForgetSet::new(shrink(s.forget.records())).unwrap();
    let normal = NormalSet::new(shrink(s.normal.records())).unwrap();
    let cfg = |iterations| RunConfig {
        iterations,
        checkpoint_every: 3,
        pool_size: 8,
        ..RunConfig::default()
    };
    let run = |name: &str, kind: OptimizerKind, threads: usize| -> (Vec<u8>, RunDir) {
        let options = UnlearnOptions {
            optimizer: kind,
            ..UnlearnOptions::default()
        };
        let dir = RunDir::new(s.dir.path().join(name));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let path = pool.install(|| {
            let reference = FrozenReference::capture(&init(&config).unwrap());
            let data = UnlearnData::new(&forget, &normal, &cfg(6), &options).unwrap();
            let mut st = unlearn_state(&reference, &options);
            run_unlearn(&mut st, &reference, &data, &cfg(6), &options, &dir, &mut |_| {}).unwrap()
        });
        (fs::read(path).unwrap(), dir)
    };
    let (a, _) = run("a", OptimizerKind::Plain, 1);
    let (b, _) = run("b", OptimizerKind::Plain, 1);
    let identical_runs = a == b;

    let (full, full_dir) = run("full", OptimizerKind::Adam, 1);
    let k3 = Checkpoint::load(&full_dir.checkpoint(3)).unwrap();
    let reloaded = s.dir.path().join("k3-again.ulrn");
    TrainState::from_checkpoint(&k3).unwrap().to_checkpoint().save(&reloaded).unwrap();
    let save_load_save = fs::read(full_dir.checkpoint(3)).unwrap() == fs::read(&reloaded).unwrap();

    let options = UnlearnOptions {
        optimizer: OptimizerKind::Adam,
        ..UnlearnOptions::default()
    };
    let reference = FrozenReference::capture(&init(&config).unwrap());
    let data = UnlearnData::new(&forget, &normal, &cfg(6), &options).unwrap();
    let mut st = TrainState::from_checkpoint(&k3).unwrap();
    let path = run_unlearn(&mut st, &reference, &data, &cfg(6), &options, &RunDir::new(s.dir.path().join("resumed")), &mut |_| {})
        .unwrap();
    let resumed = fs::read(path).unwrap() == full;
    check(
        identical_runs && save_load_save && resumed,
        format!("two runs identical: {identical_runs}, save/load/save identical: {save_load_save}, resume at step 3 identical: {resumed}"),
    )
}

fn occurrences(tokens: &[&str], gram: &[&str]) -> usize {
    if tokens.len() < gram.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len()).filter(|&i| tokens[i..i + gram.len()] == *gram).count()
}

fn brute_force_bleu(segments: &[(Vec<&str>, Vec<Vec<&str>>)]) -> f64 {
    let (mut matched, mut totals) = ([0usize; MAX_N], [0usize; MAX_N]);
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in segments {
        c += cand.len();
        r += refs
            .iter()
            .map(|x| x.len())
            .min_by_key(|&l| ((l as i64 - cand.len() as i64).abs(), l))
            .unwrap();
        for n in 1..=MAX_N.min(cand.len()) {
            let grams: Vec<&[&str]> = cand.windows(n).collect();
            totals[n - 1] += grams.len();
            for (i, g) in grams.iter().enumerate() {
                if !grams[..i].contains(g) {
                    let cap = refs.iter().map(|x| occurrences(x, g)).max().unwrap();
                    matched[n - 1] += occurrences(cand, g).min(cap);
                }
            }
        }
    }
    if c == 0 || matched[0] == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..MAX_N)
        .map(|n| match matched[n] {
            0 => (0.5 / totals[n].max(1) as f64).ln(),
            m => (m as f64 / totals[n] as f64).ln(),
        })
        .sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * (log_p / MAX_N as f64).exp()
}

fn criterion_8() -> Outcome {
    let vocab = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran"];
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let mut sentence = || -> String {
            let n = rng.random_range(1..10);
            (0..n).map(|_| vocab[rng.random_range(0..vocab.len())]).collect::<Vec<_>>().join(" ")
        };
        let texts: Vec<(String, Vec<String>)> = (0..3).map(|_| (sentence(), vec![sentence(), sentence()])).collect();
        let refs: Vec<Vec<&str>> = texts.iter().map(|(_, r)| r.iter().map(String::as_str).collect()).collect();
        let input: Vec<(&str, &[&str])> = texts.iter().zip(&refs).map(|((c, _), r)| (c.as_str(), r.as_slice())).collect();
        let tokenised: Vec<(Vec<&str>, Vec<Vec<&str>>)> = texts
            .iter()
            .map(|(c, rs)| (c.split(' ').collect(), rs.iter().map(|r| r.split(' ').collect()).collect()))
            .collect();
        worst = worst.max((corpus_bleu(&input, MAX_N) - brute_force_bleu(&tokenised)).abs());
    }
    // Precisions 3/3, 2/2, 1/1 and an empty 4-gram bucket (1/2); brevity penalty e^(1-4/3).
    let worked = corpus_bleu(&[("the cat sat", &["the cat sat down"][..])], MAX_N);
    let expected = (1.0f64 - 4.0 / 3.0).exp() * 0.5f64.powf(0.25);
    let worked_gap = (worked - expected).abs();
    check(
        worst <= 1e-9 && worked_gap <= 1e-9,
        format!("50 random cases max |Δ| {worst:.1e}, worked example {worked:.6} vs {expected:.6}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(usize, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (n, f) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL  {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
