//! `ulrn`: corpus synthesis, pretraining, LoRA finetuning, unlearning,
//! generation and evaluation from the command line.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ulrn_core::data::synth::make_synthetic_corpora;
use ulrn_core::data::tokenizer::detokenize;
use ulrn_core::data::{load_labeled, load_pairs, write_jsonl, write_labeled, Format, ForgetSet, NormalSet, PromptPair};
use ulrn_core::evaluator::{evaluate, prompt_tokens, train_classifier, write_audit, HarmClassifier};
use ulrn_core::model::checkpoint::Checkpoint;
use ulrn_core::model::{generate, init, Decoding, LoraAdapters};
use ulrn_core::objectives::KlMode;
use ulrn_core::optimizer::OptimizerKind;
use ulrn_core::unlearner::{
    finetune_state, pretrain_state, run_finetune_lora, run_pretrain, run_unlearn, start_params, unlearn_state,
    FrozenReference, RunDir, StepRecord, TrainState, UnlearnData,
};
use ulrn_core::{Error, ErrorKind};

use config::Config;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Runtime => 2,
                ErrorKind::Io => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "ulrn", version, about = "Gradient-ascent unlearning for small language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic forget, normal and labeled corpora.
    Synth(SynthArgs),
    /// Train a fresh model on a corpus.
    Pretrain(PretrainArgs),
    /// Train LoRA adapters on a frozen base checkpoint.
    Finetune(FinetuneArgs),
    /// Run the unlearning loop from a reference checkpoint.
    Unlearn(UnlearnArgs),
    /// Continue a prompt with a checkpoint.
    Generate(GenerateArgs),
    /// Fit the harm classifier on a labeled corpus.
    TrainClassifier(ClassifierArgs),
    /// Score checkpoints and write report.json / report.txt.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Seed for data order, sampling and initialisation.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Plain,
    Adam,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Plain => OptimizerKind::Plain,
            OptimizerArg::Adam => OptimizerKind::Adam,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KlArg {
    Distribution,
    TrueToken,
}

#[derive(Args, Debug)]
struct RunFlags {
    /// Number of optimizer steps.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Steps between periodic checkpoints.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Apply updates without global-norm clipping.
    #[arg(long)]
    no_clip: bool,
    /// Continue from a checkpoint written by the same command.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    forget_records: Option<usize>,
    #[arg(long)]
    normal_records: Option<usize>,
    #[arg(long)]
    labeled_records: Option<usize>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    run: RunFlags,
    /// Training corpus (JSONL prompt/response or plain text).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    context_len: Option<usize>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Frozen base model.
    #[arg(long)]
    base_checkpoint: Option<PathBuf>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lora_alpha: Option<f64>,
    /// Comma-separated projections: q,k,v,o,mlp_in,mlp_out.
    #[arg(long, value_delimiter = ',')]
    lora_targets: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct UnlearnArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    run: RunFlags,
    /// Checkpoint unlearning starts from; also the frozen reference.
    #[arg(long)]
    reference_checkpoint: Option<PathBuf>,
    #[arg(long)]
    forget: Option<PathBuf>,
    #[arg(long)]
    normal: Option<PathBuf>,
    #[arg(long)]
    eps1: Option<f64>,
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long)]
    eps3: Option<f64>,
    /// Keep the ascent term after the forget loss saturates.
    #[arg(long)]
    no_guard: bool,
    #[arg(long, value_enum)]
    kl_mode: Option<KlArg>,
    /// Descend on the forget loss instead of ascending.
    #[arg(long)]
    descent: bool,
    /// Normal responses in the random pool.
    #[arg(long)]
    pool_size: Option<usize>,
    /// Pool responses drawn per forget prompt.
    #[arg(long)]
    random_samples: Option<usize>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print a JSON record instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ClassifierArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    labeled: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Where to write the classifier (default: <out-dir>/classifier.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// `tag=path` (or just `path`) per model row, in table order.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<String>,
    #[arg(long)]
    forget: Option<PathBuf>,
    #[arg(long)]
    normal: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    max_new: Option<usize>,
    /// Row tag effectiveness is measured against.
    #[arg(long)]
    baseline: Option<String>,
}

fn base_config(common: &Common) -> CliResult<Config> {
    let mut cfg = Config::load(common.config.as_deref())?;
    if let Some(d) = &common.out_dir {
        cfg.paths.out_dir = Some(d.clone());
    }
    if let Some(s) = common.seed {
        cfg.run.seed = s;
        cfg.model.seed = s;
        cfg.lora.seed = s;
        cfg.classifier.seed = s;
    }
    Ok(cfg)
}

fn apply_run(cfg: &mut Config, run: &RunFlags) {
    if let Some(v) = run.iterations {
        cfg.run.iterations = v;
    }
    if let Some(v) = run.batch_size {
        cfg.run.batch_size = v;
    }
    if let Some(v) = run.checkpoint_every {
        cfg.run.checkpoint_every = v;
    }
    if let Some(v) = &run.resume {
        cfg.paths.resume = Some(v.clone());
    }
}

fn require<'a>(value: &'a Option<PathBuf>, name: &str, missing: &mut Vec<String>) -> Option<&'a Path> {
    if value.is_none() {
        missing.push(format!("{name} is required"));
    }
    value.as_deref()
}

fn check_missing(missing: Vec<String>) -> CliResult {
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(missing.join("; ")))
    }
}

fn out_dir(cfg: &Config) -> PathBuf {
    cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn progress(iterations: usize) -> impl FnMut(&StepRecord) {
    move |r| {
        let s = r.step();
        if s % 100 == 0 || s == iterations {
            match r {
                StepRecord::Lm(l) => println!("step {s}: loss {:.4} per-token {:.4}", l.loss, l.per_token),
                StepRecord::Unlearn(b) => println!(
                    "step {s}: l_fgt {:.4} l_rdn {:.4} l_nor {:.6} total {:.4} forget/token {:.4}",
                    b.l_fgt, b.l_rdn, b.l_nor, b.total, b.forget_per_token
                ),
            }
        }
    }
}

fn load_data(path: &Path, context_len: usize) -> CliResult<Vec<PromptPair>> {
    let (pairs, stats) = load_pairs(path, Format::from_path(path), context_len)?;
    log::info!("{}: {} records", path.display(), stats.records);
    Ok(pairs)
}

fn resume_state(path: &Path) -> CliResult<TrainState> {
    Ok(TrainState::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let mut cfg = base_config(&args.common)?;
    if let Some(v) = args.forget_records {
        cfg.synth.forget_records = v;
    }
    if let Some(v) = args.normal_records {
        cfg.synth.normal_records = v;
    }
    if let Some(v) = args.labeled_records {
        cfg.synth.labeled_records = v;
    }
    let dir = out_dir(&cfg);
    let corpora = make_synthetic_corpora(cfg.run.seed, &cfg.synth);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_jsonl(&dir.join("forget.jsonl"), &corpora.forget)?;
    write_jsonl(&dir.join("normal.jsonl"), &corpora.normal)?;
    write_labeled(&dir.join("labeled.jsonl"), &corpora.labeled)?;
    cfg.echo(&dir)?;
    println!("wrote forget.jsonl, normal.jsonl, labeled.jsonl to {}", dir.display());
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> CliResult {
    let mut cfg = base_config(&args.common)?;
    apply_run(&mut cfg, &args.run);
    if let Some(v) = args.run.lr {
        cfg.run.lr = v;
    }
    if let Some(v) = args.run.optimizer {
        cfg.run.optimizer = v.into();
    }
    if args.run.no_clip {
        cfg.run.clip_norm = None;
    }
    if let Some(d) = &args.data {
        cfg.paths.data = Some(d.clone());
    }
    let m = &mut cfg.model;
    for (slot, v) in [
        (&mut m.d_model, args.d_model),
        (&mut m.n_layers, args.n_layers),
        (&mut m.n_heads, args.n_heads),
        (&mut m.context_len, args.context_len),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    let mut missing = Vec::new();
    let data_path = require(&cfg.paths.data, "--data", &mut missing);
    check_missing(missing)?;
    cfg.validate()?;
    let mut state = match &cfg.paths.resume {
        Some(p) => resume_state(p)?,
        None => pretrain_state(init(&cfg.model)?, &cfg.run),
    };
    let data = load_data(data_path.expect("checked"), state.params().config.context_len)?;
    let dir = RunDir::new(out_dir(&cfg));
    cfg.echo(&dir.root)?;
    let path = run_pretrain(&mut state, &data, &cfg.run, &dir, &mut progress(cfg.run.iterations))?;
    println!("final checkpoint {}", path.display());
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> CliResult {
    let mut cfg = base_config(&args.common)?;
    apply_run(&mut cfg, &args.run);
    if let Some(v) = args.run.lr {
        cfg.run.lr = v;
    }
    if let Some(v) = args.run.optimizer {
        cfg.run.optimizer = v.into();
    }
    if args.run.no_clip {
        cfg.run.clip_norm = None;
    }
    if let Some(d) = &args.data {
        cfg.paths.data = Some(d.clone());
    }
    if let Some(p) = &args.base_checkpoint {
        cfg.paths.base_checkpoint = Some(p.clone());
    }
    if let Some(v) = args.lora_rank {
        cfg.lora.rank = v;
    }
    if let Some(v) = args.lora_alpha {
        cfg.lora.alpha = v;
    }
    if let Some(v) = &args.lora_targets {
        cfg.lora.targets = v.clone();
    }
    let mut missing = Vec::new();
    let data_path = require(&cfg.paths.data, "--data", &mut missing);
    let base_path = require(&cfg.paths.base_checkpoint, "--base-checkpoint", &mut missing);
    check_missing(missing)?;
    cfg.validate()?;
    let base = Checkpoint::load(base_path.expect("checked"))?.model::<f32>()?;
    cfg.model = base.config.clone();
    let mut state = match &cfg.paths.resume {
        Some(p) => resume_state(p)?,
        None => {
            let adapters = LoraAdapters::init(&base, &cfg.lora)?;
            finetune_state(base, adapters, &cfg.run)
        }
    };
    let data = load_data(data_path.expect("checked"), cfg.model.context_len)?;
    let dir = RunDir::new(out_dir(&cfg));
    cfg.echo(&dir.root)?;
    let path = run_finetune_lora(&mut state, &data, &cfg.run, &dir, &mut progress(cfg.run.iterations))?;
    println!("final checkpoint {}", path.display());
    Ok(())
}

fn cmd_unlearn(args: UnlearnArgs) -> CliResult {
    let mut cfg = base_config(&args.common)?;
    apply_run(&mut cfg, &args.run);
    let u = &mut cfg.unlearn;
    if let Some(v) = args.run.lr {
        u.weights.lr = v;
    }
    if let Some(v) = args.run.optimizer {
        u.optimizer = v.into();
    }
    if args.run.no_clip {
        u.clip_norm = None;
    }
    for (slot, v) in [(&mut u.weights.eps1, args.eps1), (&mut u.weights.eps2, args.eps2), (&mut u.weights.eps3, args.eps3)] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if args.no_guard {
        u.divergence_guard = false;
    }
    if let Some(k) = args.kl_mode {
        u.kl_mode = match k {
            KlArg::Distribution => KlMode::Distribution,
            KlArg::TrueToken => KlMode::TrueToken,
        };
    }
    if args.descent {
        u.ascent = false;
    }
    if let Some(v) = args.random_samples {
        u.random_samples = v;
    }
    if let Some(v) = args.pool_size {
        cfg.run.pool_size = v;
    }
    for (slot, v) in [
        (&mut cfg.paths.reference_checkpoint, &args.reference_checkpoint),
        (&mut cfg.paths.forget, &args.forget),
        (&mut cfg.paths.normal, &args.normal),
    ] {
        if let Some(v) = v {
            *slot = Some(v.clone());
        }
    }
    let mut missing = Vec::new();
    let ref_path = require(&cfg.paths.reference_checkpoint, "--reference-checkpoint", &mut missing);
    let forget_path = require(&cfg.paths.forget, "--forget", &mut missing);
    let normal_path = require(&cfg.paths.normal, "--normal", &mut missing);
    check_missing(missing)?;
    cfg.validate()?;
    let reference = FrozenReference::capture(&start_params(&Checkpoint::load(ref_path.expect("checked"))?)?);
    cfg.model = reference.params().config.clone();
    let ctx = cfg.model.context_len;
    let forget = ForgetSet::new(load_data(forget_path.expect("checked"), ctx)?)?;
    let normal = NormalSet::new(load_data(normal_path.expect("checked"), ctx)?)?;
    let mut state = match &cfg.paths.resume {
        Some(p) => resume_state(p)?,
        None => unlearn_state(&reference, &cfg.unlearn),
    };
    let data = UnlearnData::new(&forget, &normal, &cfg.run, &cfg.unlearn)?;
    let dir = RunDir::new(out_dir(&cfg));
    cfg.echo(&dir.root)?;
    let path = run_unlearn(
        &mut state,
        &reference,
        &data,
        &cfg.run,
        &cfg.unlearn,
        &dir,
        &mut progress(cfg.run.iterations),
    )?;
    println!("final checkpoint {}", path.display());
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> CliResult {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let params = ck.model::<f32>()?;
    let adapters = ck.adapters::<f32>()?;
    let decoding = match args.temperature {
        Some(t) if t > 0.0 => Decoding::Temperature {
            temperature: t,
            seed: args.seed,
        },
        Some(t) if t < 0.0 => return Err(CliError::Validation(format!("--temperature must be ≥ 0, got {t}"))),
        _ => Decoding::Greedy,
    };
    let prompt = prompt_tokens(&args.prompt);
    let g = generate(&params, &prompt, args.max_new, decoding, adapters.as_ref())?;
    let continuation = detokenize(g.continuation());
    if args.json {
        let rec = serde_json::json!({
            "prompt": args.prompt,
            "continuation": continuation,
            "tokens": g.continuation(),
            "stopped_at_eos": g.stopped_at_eos,
            "truncated": g.truncated,
        });
        println!("{rec}");
    } else {
        println!("{}{}", args.prompt, continuation);
    }
    Ok(())
}

fn cmd_train_classifier(args: ClassifierArgs) -> CliResult {
    let mut cfg = base_config(&args.common)?;
    if let Some(v) = args.epochs {
        cfg.classifier.epochs = v;
    }
    if let Some(v) = &args.labeled {
        cfg.paths.labeled = Some(v.clone());
    }
    let dir = out_dir(&cfg);
    if let Some(v) = &args.out {
        cfg.paths.classifier = Some(v.clone());
    }
    let out = cfg.paths.classifier.clone().unwrap_or_else(|| dir.join("classifier.json"));
    let mut missing = Vec::new();
    let labeled = require(&cfg.paths.labeled, "--labeled", &mut missing);
    check_missing(missing)?;
    if cfg.classifier.epochs == 0 {
        return Err(CliError::Validation("classifier.epochs must be at least 1".into()));
    }
    let rows = load_labeled(labeled.expect("checked"))?;
    let c = train_classifier(&rows, cfg.classifier.epochs, cfg.classifier.seed)?;
    c.save(&out)?;
    cfg.echo(&dir)?;
    println!(
        "held-out accuracy {:.4} ({} train / {} held out); wrote {}",
        c.accuracy,
        c.train_size,
        c.held_out_size,
        out.display()
    );
    Ok(())
}

fn parse_row(spec: &str) -> (Option<String>, PathBuf) {
    match spec.split_once('=') {
        Some((tag, path)) if !tag.is_empty() => (Some(tag.to_string()), PathBuf::from(path)),
        _ => (None, PathBuf::from(spec)),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult {
    let mut cfg = base_config(&args.common)?;
    for (slot, v) in [
        (&mut cfg.paths.forget, &args.forget),
        (&mut cfg.paths.normal, &args.normal),
        (&mut cfg.paths.classifier, &args.classifier),
    ] {
        if let Some(v) = v {
            *slot = Some(v.clone());
        }
    }
    if let Some(v) = args.samples {
        cfg.eval.samples = v;
    }
    if let Some(v) = args.max_new {
        cfg.eval.max_new = v;
    }
    let mut missing = Vec::new();
    let forget_path = require(&cfg.paths.forget, "--forget", &mut missing);
    let normal_path = require(&cfg.paths.normal, "--normal", &mut missing);
    let clf_path = require(&cfg.paths.classifier, "--classifier", &mut missing);
    check_missing(missing)?;
    cfg.validate()?;
    let mut absent: Vec<String> = [forget_path, normal_path]
        .into_iter()
        .flatten()
        .filter(|p| !p.exists())
        .map(|p| format!("{} does not exist", p.display()))
        .collect();
    let clf_path = clf_path.expect("checked");
    if !clf_path.exists() {
        absent.push(format!(
            "classifier {} does not exist; run `ulrn train-classifier` first",
            clf_path.display()
        ));
    }
    if !absent.is_empty() {
        return Err(Error::Io {
            context: absent.join("; "),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        }
        .into());
    }
    let classifier = HarmClassifier::load(clf_path)?;
    let mut models = Vec::new();
    let mut ctx = usize::MAX;
    for spec in &args.checkpoints {
        let (tag, path) = parse_row(spec);
        let ck = match Checkpoint::load(&path) {
            Ok(ck) => ck,
            Err(e) => {
                log::warn!("skipping row {spec}: {e}");
                eprintln!("warning: skipping row {spec}: {e}");
                continue;
            }
        };
        let tag = tag
            .or_else(|| ck.get("tag").map(str::to_string))
            .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        let params = start_params(&ck)?;
        ctx = ctx.min(params.config.context_len);
        models.push((tag, params));
    }
    if models.is_empty() {
        return Err(Error::Checkpoint("no checkpoint could be loaded".into()).into());
    }
    let forget = load_data(forget_path.expect("checked"), ctx)?;
    let normal = load_data(normal_path.expect("checked"), ctx)?;
    let (report, audit) = evaluate(
        &models,
        &forget,
        &normal,
        &classifier,
        &cfg.eval,
        args.baseline.as_deref(),
    )?;
    let dir = out_dir(&cfg);
    report.write(&dir)?;
    write_audit(&dir.join("audit.jsonl"), &audit)?;
    cfg.echo(&dir)?;
    print!("{}", report.to_table());
    Ok(())
}

fn configure_threads() -> CliResult {
    if let Ok(v) = std::env::var("ULRN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Validation(format!("ULRN_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Unlearn(a) => cmd_unlearn(a),
        Command::Generate(a) => cmd_generate(a),
        Command::TrainClassifier(a) => cmd_train_classifier(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_specs() {
        assert_eq!(parse_row("a=b/c.ulrn"), (Some("a".into()), PathBuf::from("b/c.ulrn")));
        assert_eq!(parse_row("b/c.ulrn"), (None, PathBuf::from("b/c.ulrn")));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(Error::Checkpoint("x".into())).exit_code(), 3);
        assert_eq!(
            CliError::Core(Error::Diverged {
                step: 1,
                reason: "nan".into()
            })
            .exit_code(),
            2
        );
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
