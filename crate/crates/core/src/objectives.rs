//! Loss functions and update rules for gradient-ascent unlearning.
//!
//! The unlearning objective for one step is
//!
//! ```text
//! ε₁·L_fgt + ε₂·L_rdn + ε₃·L_nor
//! L_fgt = −Σ L(x_fgt, y_fgt)                    (ascent through the sign)
//! L_rdn =  Σ_x (1/k) Σ_{y ∈ sample} L(x_fgt, y)  (k responses from the pool)
//! L_nor =  Σ Σ_i KL(P_ref(·|x, y<i) ‖ P_θ(·|x, y<i))
//! ```
//!
//! with `L(x, y)` the summed token cross-entropy of `y` given `x`, and every
//! sum divided by the batch size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ScalarFn, Var};
use crate::data::tokenizer::VOCAB_SIZE;
use crate::data::PromptPair;
use crate::error::{Error, Result};
use crate::model::{self, BoundAdapters, LoraAdapters, ModelConfig, ModelParams, TOKEN_EMBEDDING};
use crate::optimizer::{clip_global_norm, Optimizer, OptimizerKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub lr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            eps1: 0.5,
            eps2: 1.0,
            eps3: 1.0,
            lr: 2e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (k, v) in [("weights.eps1", self.eps1), ("weights.eps2", self.eps2), ("weights.eps3", self.eps3)] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{k} must be a non-negative number, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("weights.lr must be positive, got {}", self.lr));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// How the retention term compares the two models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// KL between full next-token distributions.
    Distribution,
    /// Bernoulli KL between the probabilities each model gives the true token.
    TrueToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnOptions {
    pub weights: LossWeights,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm cap; `None` applies the raw update.
    #[serde(with = "crate::optimizer::clip_serde")]
    pub clip_norm: Option<f64>,
    /// Stop the ascent term once forget loss per token exceeds `3·ln V`.
    pub divergence_guard: bool,
    pub kl_mode: KlMode,
    /// `true` uses `L_fgt = −ΣL` as printed; `false` flips it to plain descent.
    pub ascent: bool,
    /// Pool responses drawn per forget prompt.
    pub random_samples: usize,
}

impl Default for UnlearnOptions {
    fn default() -> Self {
        UnlearnOptions {
            weights: LossWeights::default(),
            optimizer: OptimizerKind::Plain,
            clip_norm: Some(1.0),
            divergence_guard: true,
            kl_mode: KlMode::Distribution,
            ascent: true,
            random_samples: crate::data::DEFAULT_POOL_SAMPLE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Forget,
    Random,
    Normal,
    /// Next-token cross-entropy over every position of `prompt ++ response`.
    Lm,
}

/// One sequence's contribution: `norm · loss(term, prompt, response)`.
#[derive(Clone, Copy, Debug)]
pub struct Job<'a> {
    pub term: Term,
    pub prompt: &'a [usize],
    pub response: &'a [usize],
    pub norm: f64,
}

/// Which tensors receive gradients.
#[derive(Clone, Copy)]
pub struct Trainable<'a, T: Scalar> {
    pub params: &'a ModelParams<T>,
    pub adapters: Option<&'a LoraAdapters<T>>,
    /// When true only the adapters are trained and `params` stay frozen.
    pub adapters_only: bool,
}

impl<'a, T: Scalar> Trainable<'a, T> {
    pub fn full(params: &'a ModelParams<T>) -> Self {
        Trainable {
            params,
            adapters: None,
            adapters_only: false,
        }
    }

    pub fn lora(params: &'a ModelParams<T>, adapters: &'a LoraAdapters<T>) -> Self {
        Trainable {
            params,
            adapters: Some(adapters),
            adapters_only: true,
        }
    }

    fn zero_grads(&self) -> Vec<Vec<T>> {
        if self.adapters_only {
            self.adapters
                .expect("adapters")
                .tensors()
                .map(|t| vec![T::zero(); t.len()])
                .collect()
        } else {
            self.params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect()
        }
    }
}

fn check_pair(config: &ModelConfig, prompt: &[usize], response: &[usize]) -> Result<()> {
    if prompt.is_empty() || response.is_empty() {
        return Err(Error::Contract("prompt and response must be non-empty".into()));
    }
    let len = prompt.len() + response.len();
    if len > config.context_len + 1 {
        // The last token is only ever a target, never an input.
        return Err(Error::ContextOverflow {
            len,
            context_len: config.context_len,
        });
    }
    Ok(())
}

/// Log-probabilities `[|y|, V]` of each response position.
fn response_log_probs<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    pv: &[Var],
    adapters: Option<&BoundAdapters<T>>,
    prompt: &[usize],
    response: &[usize],
) -> Result<Var> {
    check_pair(config, prompt, response)?;
    let mut input = prompt.to_vec();
    input.extend_from_slice(&response[..response.len() - 1]);
    let h = model::hidden_states(g, config, pv, &input, adapters)?;
    let rows = g.slice_rows(h, prompt.len() - 1, response.len())?;
    let unembed = g.transpose(pv[TOKEN_EMBEDDING])?;
    let logits = g.matmul(rows, unembed)?;
    g.log_softmax(logits)
}

fn reference_log_probs<T: Scalar>(reference: &ModelParams<T>, prompt: &[usize], response: &[usize]) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let pv = reference.bind(&mut g, false)?;
    let lp = response_log_probs(&mut g, &reference.config, &pv, None, prompt, response)?;
    Ok(g.value(lp).to_vec())
}

/// Unweighted loss of one job inside `g`.
#[allow(clippy::too_many_arguments)]
fn job_loss<T: Scalar>(
    g: &mut Graph<T>,
    config: &ModelConfig,
    pv: &[Var],
    adapters: Option<&BoundAdapters<T>>,
    job: &Job<'_>,
    reference: Option<&ModelParams<T>>,
    kl_mode: KlMode,
) -> Result<Var> {
    match job.term {
        Term::Forget | Term::Random => {
            let lp = response_log_probs(g, config, pv, adapters, job.prompt, job.response)?;
            let picked = g.pick(lp, job.response)?;
            let s = g.sum(picked)?;
            g.scale(s, -T::one())
        }
        Term::Lm => {
            let mut tokens = job.prompt.to_vec();
            tokens.extend_from_slice(job.response);
            if tokens.len() < 2 {
                return Err(Error::Contract("language-model loss needs two tokens".into()));
            }
            let logits = model::logits_graph(g, config, pv, &tokens[..tokens.len() - 1], adapters)?;
            let lp = g.log_softmax(logits)?;
            let picked = g.pick(lp, &tokens[1..])?;
            let s = g.sum(picked)?;
            g.scale(s, -T::one())
        }
        Term::Normal => {
            let reference =
                reference.ok_or_else(|| Error::Contract("retention term needs a frozen reference".into()))?;
            let ref_lp = reference_log_probs(reference, job.prompt, job.response)?;
            let lp = response_log_probs(g, config, pv, adapters, job.prompt, job.response)?;
            match kl_mode {
                KlMode::Distribution => {
                    let p: Vec<T> = ref_lp.iter().map(|v| v.exp()).collect();
                    let neg_entropy = p.iter().zip(&ref_lp).map(|(&p, &l)| p * l).fold(T::zero(), |a, b| a + b);
                    let pc = g.constant(g.shape(lp).to_vec(), p)?;
                    let cross = g.mul(lp, pc)?;
                    let cross = g.sum(cross)?;
                    g.affine(cross, -T::one(), neg_entropy)
                }
                KlMode::TrueToken => {
                    let v = config.vocab_size;
                    let p: Vec<T> = job
                        .response
                        .iter()
                        .enumerate()
                        .map(|(i, &t)| ref_lp[i * v + t].exp())
                        .collect();
                    let one = T::one();
                    let constant = p
                        .iter()
                        .map(|&p| {
                            let a = if p > T::zero() { p * p.ln() } else { T::zero() };
                            let b = if p < one { (one - p) * (one - p).ln() } else { T::zero() };
                            a + b
                        })
                        .fold(T::zero(), |a, b| a + b);
                    let n = p.len();
                    let q_log = g.pick(lp, job.response)?;
                    let q = g.exp(q_log)?;
                    let one_minus_q = g.affine(q, -one, one)?;
                    let log_one_minus_q = g.log(one_minus_q)?;
                    let pc = g.constant(vec![n], p.clone())?;
                    let rc = g.constant(vec![n], p.iter().map(|&p| one - p).collect())?;
                    let a = g.mul(q_log, pc)?;
                    let b = g.mul(log_one_minus_q, rc)?;
                    let ab = g.add(a, b)?;
                    let cross = g.sum(ab)?;
                    g.affine(cross, -one, constant)
                }
            }
        }
    }
}

/// Values of each job and the gradient of `Σ coef_j · loss_j` with respect to
/// the trainable tensors. Jobs run in parallel; gradients are reduced in job
/// order so the result does not depend on the thread count.
pub fn objective_gradients<T: Scalar>(
    target: Trainable<'_, T>,
    reference: Option<&ModelParams<T>>,
    jobs: &[Job<'_>],
    coefs: &[f64],
    kl_mode: KlMode,
) -> Result<(Vec<f64>, Vec<Vec<T>>)> {
    assert_eq!(jobs.len(), coefs.len());
    let results: Vec<(f64, Option<Vec<Vec<T>>>)> = jobs
        .par_iter()
        .zip(coefs.par_iter())
        .map(|(job, &coef)| run_job(target, reference, job, coef, kl_mode))
        .collect::<Result<_>>()?;
    let mut grads = target.zero_grads();
    let mut values = Vec::with_capacity(results.len());
    for (value, g) in results {
        values.push(value);
        if let Some(g) = g {
            for (acc, part) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(part).for_each(|(a, b)| *a = *a + b);
            }
        }
    }
    Ok((values, grads))
}

fn run_job<T: Scalar>(
    target: Trainable<'_, T>,
    reference: Option<&ModelParams<T>>,
    job: &Job<'_>,
    coef: f64,
    kl_mode: KlMode,
) -> Result<(f64, Option<Vec<Vec<T>>>)> {
    let train = coef != 0.0;
    let mut g = Graph::new();
    let pv = target.params.bind(&mut g, train && !target.adapters_only)?;
    let bound = target
        .adapters
        .map(|a| a.bind(&mut g, target.params, train && target.adapters_only))
        .transpose()?;
    let loss = job_loss(&mut g, &target.params.config, &pv, bound.as_ref(), job, reference, kl_mode)?;
    let value = g.scalar_value(loss).as_f64();
    if !train {
        return Ok((value, None));
    }
    let scaled = g.scale(loss, T::lit(coef))?;
    g.backward(scaled)?;
    let vars: Vec<Var> = match (&bound, target.adapters_only) {
        (Some(b), true) => b.vars().flat_map(|(a, b)| [a, b]).collect(),
        _ => pv,
    };
    let grads = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); g.value(v).len()])
        })
        .collect();
    Ok((value, Some(grads)))
}

/// Objective `Σ coef_j · loss_j` over model weights, for finite-difference checks.
pub struct ObjectiveFn<'a> {
    pub config: ModelConfig,
    pub jobs: Vec<Job<'a>>,
    pub coefs: Vec<f64>,
    pub reference: Option<ModelParams<f64>>,
    pub kl_mode: KlMode,
}

impl ScalarFn for ObjectiveFn<'_> {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let reference = self.reference.as_ref().map(ModelParams::cast::<T>);
        let mut total: Option<Var> = None;
        for (job, &coef) in self.jobs.iter().zip(&self.coefs) {
            let l = job_loss(g, &self.config, inputs, None, job, reference.as_ref(), self.kl_mode)?;
            let l = g.scale(l, T::lit(coef))?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        total.ok_or_else(|| Error::Contract("objective without terms".into()))
    }
}

fn eval_single<T: Scalar>(params: &ModelParams<T>, reference: Option<&ModelParams<T>>, job: Job<'_>, kl_mode: KlMode) -> Result<f64> {
    Ok(run_job(Trainable::full(params), reference, &job, 0.0, kl_mode)?.0)
}

/// `L(x, y) = Σ_i CE(P(·|x, y<i), y_i)`, summed over response tokens.
pub fn sequence_loss<T: Scalar>(params: &ModelParams<T>, x: &[usize], y: &[usize]) -> Result<f64> {
    let job = Job {
        term: Term::Forget,
        prompt: x,
        response: y,
        norm: 1.0,
    };
    eval_single(params, None, job, KlMode::Distribution)
}

/// `−Σ L(x, y)` over the batch.
pub fn forget_loss<T: Scalar>(params: &ModelParams<T>, batch: &[&PromptPair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("forget batch must be non-empty".into()));
    }
    let mut total = 0.0;
    for r in batch {
        total -= sequence_loss(params, &r.prompt, &r.response)?;
    }
    Ok(total)
}

/// `Σ_x (1/k) Σ_y L(x, y)` for each prompt and its sampled responses.
pub fn random_mismatch_loss<T: Scalar>(params: &ModelParams<T>, prompts: &[&[usize]], samples: &[Vec<&[usize]>]) -> Result<f64> {
    if prompts.len() != samples.len() || samples.iter().any(Vec::is_empty) {
        return Err(Error::Contract("each forget prompt needs at least one sampled response".into()));
    }
    let mut total = 0.0;
    for (x, ys) in prompts.iter().zip(samples) {
        let mut s = 0.0;
        for y in ys {
            s += sequence_loss(params, x, y)?;
        }
        total += s / ys.len() as f64;
    }
    Ok(total)
}

/// `Σ_records Σ_i KL(P_ref ‖ P_θ)` over response positions.
pub fn normal_kl_loss<T: Scalar>(
    params: &ModelParams<T>,
    reference: &ModelParams<T>,
    batch: &[&PromptPair],
    kl_mode: KlMode,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("normal batch must be non-empty".into()));
    }
    let mut total = 0.0;
    for r in batch {
        let job = Job {
            term: Term::Normal,
            prompt: &r.prompt,
            response: &r.response,
            norm: 1.0,
        };
        total += eval_single(params, Some(reference), job, kl_mode)?;
    }
    Ok(total)
}

/// KL divergence between two explicit distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q).ln())
        .sum()
}

/// `θ ← θ + λ·∇L(x, y)`: one step of plain gradient ascent.
pub fn ga_step<T: Scalar>(params: &mut ModelParams<T>, x: &[usize], y: &[usize], lr: f64) -> Result<()> {
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::Contract(format!("learning rate must be non-negative, got {lr}")));
    }
    let job = Job {
        term: Term::Forget,
        prompt: x,
        response: y,
        norm: 1.0,
    };
    let (_, grads) = objective_gradients(Trainable::full(params), None, &[job], &[1.0], KlMode::Distribution)?;
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NumericOverflow { op: "ga_step gradient" });
    }
    let lr = T::lit(lr);
    for (t, g) in params.tensors_mut().iter_mut().zip(&grads) {
        t.data_mut().iter_mut().zip(g).for_each(|(w, &g)| *w = *w + lr * g);
    }
    Ok(())
}

/// Inputs of one unlearning step: forget records, the pool responses drawn
/// for each of them, and normal records.
pub struct UnlearnBatch<'a> {
    pub forget: Vec<&'a PromptPair>,
    pub random: Vec<Vec<&'a [usize]>>,
    pub normal: Vec<&'a PromptPair>,
}

impl<'a> UnlearnBatch<'a> {
    fn validate(&self) -> Result<()> {
        if self.forget.is_empty() || self.normal.is_empty() {
            return Err(Error::Contract("forget and normal batches must be non-empty".into()));
        }
        if self.random.len() != self.forget.len() || self.random.iter().any(Vec::is_empty) {
            return Err(Error::Contract("every forget prompt needs sampled pool responses".into()));
        }
        Ok(())
    }

    /// Jobs with their batch normalisation (`norm`); term weights are applied separately.
    pub fn jobs(&self, ascent: bool) -> Vec<Job<'a>> {
        let b = self.forget.len() as f64;
        let sign = if ascent { -1.0 } else { 1.0 };
        let mut jobs = Vec::new();
        for r in &self.forget {
            jobs.push(Job {
                term: Term::Forget,
                prompt: &r.prompt,
                response: &r.response,
                norm: sign / b,
            });
        }
        for (r, ys) in self.forget.iter().zip(&self.random) {
            for y in ys {
                jobs.push(Job {
                    term: Term::Random,
                    prompt: &r.prompt,
                    response: y,
                    norm: 1.0 / (ys.len() as f64 * b),
                });
            }
        }
        let bn = self.normal.len() as f64;
        for r in &self.normal {
            jobs.push(Job {
                term: Term::Normal,
                prompt: &r.prompt,
                response: &r.response,
                norm: 1.0 / bn,
            });
        }
        jobs
    }
}

/// Per-step record of the three loss terms (batch-normalised).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_fgt: f64,
    pub l_rdn: f64,
    pub l_nor: f64,
    pub total: f64,
    /// Forget-set cross-entropy per response token (positive).
    pub forget_per_token: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// ε₁ actually used this step (zero once the guard has fired).
    pub eps1_used: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_fgt, self.l_rdn, self.l_nor, self.total].iter().all(|v| v.is_finite())
    }
}

pub fn divergence_threshold(vocab_size: usize) -> f64 {
    3.0 * (vocab_size as f64).ln()
}

/// Mutable state of an unlearning run.
#[derive(Clone, Debug)]
pub struct UnlearnState<T: Scalar = f32> {
    pub params: ModelParams<T>,
    pub optimizer: Optimizer<T>,
    pub guard_tripped: bool,
    pub step: usize,
}

impl<T: Scalar> UnlearnState<T> {
    pub fn new(params: ModelParams<T>, options: &UnlearnOptions) -> Self {
        UnlearnState {
            params,
            optimizer: Optimizer::new(options.optimizer, options.weights.lr),
            guard_tripped: false,
            step: 0,
        }
    }
}

/// One application of `θ ← θ − λ·update(∇(ε₁L_fgt + ε₂L_rdn + ε₃L_nor))`.
/// On error the parameters are left untouched.
pub fn unlearn_step<T: Scalar>(
    state: &mut UnlearnState<T>,
    reference: &ModelParams<T>,
    batch: &UnlearnBatch<'_>,
    options: &UnlearnOptions,
) -> Result<LossBreakdown> {
    options.weights.validate()?;
    batch.validate()?;
    let w = options.weights;
    let eps1 = if state.guard_tripped { 0.0 } else { w.eps1 };
    let jobs = batch.jobs(options.ascent);
    let coefs: Vec<f64> = jobs
        .iter()
        .map(|j| {
            j.norm
                * match j.term {
                    Term::Forget => eps1,
                    Term::Random => w.eps2,
                    Term::Normal | Term::Lm => w.eps3,
                }
        })
        .collect();
    let step = state.step + 1;
    let (values, mut grads) =
        objective_gradients(Trainable::full(&state.params), Some(reference), &jobs, &coefs, options.kl_mode)
            .map_err(|e| Error::Diverged {
                step,
                reason: e.to_string(),
            })?;

    let term_sum = |term: Term| -> f64 {
        jobs.iter()
            .zip(&values)
            .filter(|(j, _)| j.term == term)
            .map(|(j, v)| j.norm * v)
            .sum()
    };
    let (l_fgt, l_rdn, l_nor) = (term_sum(Term::Forget), term_sum(Term::Random), term_sum(Term::Normal));
    let forget_tokens: usize = batch.forget.iter().map(|r| r.response.len()).sum();
    let forget_ce: f64 = jobs
        .iter()
        .zip(&values)
        .filter(|(j, _)| j.term == Term::Forget)
        .map(|(_, v)| v)
        .sum();
    let mut breakdown = LossBreakdown {
        step,
        l_fgt,
        l_rdn,
        l_nor,
        total: eps1 * l_fgt + w.eps2 * l_rdn + w.eps3 * l_nor,
        forget_per_token: forget_ce / forget_tokens as f64,
        grad_norm: 0.0,
        eps1_used: eps1,
    };
    if !breakdown.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: format!("non-finite loss {breakdown:?}"),
        });
    }
    breakdown.grad_norm = match options.clip_norm {
        Some(max) => clip_global_norm(&mut grads, max),
        None => crate::optimizer::global_norm(&grads),
    };
    state.optimizer.lr = w.lr;
    state
        .optimizer
        .step(state.params.tensors_mut().iter_mut(), &grads)
        .map_err(|e| Error::Diverged {
            step,
            reason: format!("{e}; losses {breakdown:?}"),
        })?;
    state.step = step;
    if options.divergence_guard && breakdown.forget_per_token > divergence_threshold(state.params.config.vocab_size) {
        state.guard_tripped = true;
    }
    Ok(breakdown)
}

/// Mean next-token cross-entropy per predicted token over `records`
/// (response tokens only).
pub fn per_token_loss<T: Scalar>(params: &ModelParams<T>, records: &[PromptPair]) -> Result<f64> {
    let results: Vec<(f64, usize)> = records
        .par_iter()
        .map(|r| Ok((sequence_loss(params, &r.prompt, &r.response)?, r.response.len())))
        .collect::<Result<_>>()?;
    let (loss, tokens) = results.iter().fold((0.0, 0), |(l, t), (a, b)| (l + a, t + b));
    Ok(loss / tokens.max(1) as f64)
}

/// Uniform-logit reference value `ln V`.
pub fn uniform_cross_entropy() -> f64 {
    (VOCAB_SIZE as f64).ln()
}

/// Convenience for tests and tools: a tensor list as an `f64` point.
pub fn params_as_point<T: Scalar>(params: &ModelParams<T>) -> Vec<Tensor<T>> {
    params.tensors().to_vec()
}
