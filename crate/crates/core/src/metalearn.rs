//! The bi-level engine: K-step inner fine-tuning, the robustness-regularized
//! meta objective, the two-step-size meta-update, the training loop and
//! meta-testing.
//!
//! Per task `i` with fine-tuned weights `w_i'`:
//!
//! ```text
//! objective = mean_i [ ℓ(w_i'; query) + γ_out R(w_i'; query) + γ_CL ℓ_CL(w_i') ]
//! w_i'      = K steps of GD on ℓ(·; support) + γ_in R(·; support) from w
//! ```
//!
//! With `γ_out = ∞` the clean query term is dropped and the objective is the
//! robust term alone (adversarial querying).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::autodiff::{Graph, Var};
use crate::contrastive::{adversarial_views, contrastive_loss, make_views, ContrastiveConfig};
use crate::error::{Error, Result};
use crate::evaluation::{sweep, EvalReport};
use crate::exec::Executor;
use crate::model::{cross_entropy, MetaModel, Network};
use crate::regularizer::{regularizer, robust_objective, RobustKind, RobustSpec};
use crate::rng::{rng_for, stream};
use crate::tasks::{Episode, LabeledBatch};
use crate::tensor::Tensor;

/// Which parameters inner fine-tuning may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Full,
    /// Only the classification head (ANIL); the encoder stays at `w`.
    HeadOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    /// `w -= β1 G_clean + β2 G_robust`.
    #[default]
    Sgd,
    /// Adam with learning rate `β1` on `G_clean + (β2/β1) G_robust`.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub gamma_in: f64,
    /// `f64::INFINITY` selects adversarial querying.
    pub gamma_out: f64,
    pub gamma_cl: f64,
    pub inner_steps: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub finetune_scope: Scope,
    pub robust: RobustSpec,
    pub tasks_per_batch: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub seed: u64,
    /// Treat the inner-loop gradients as constants (first-order MAML).
    #[serde(default)]
    pub first_order: bool,
    #[serde(default)]
    pub outer_optimizer: OuterOptimizer,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            gamma_in: 0.0,
            gamma_out: 0.0,
            gamma_cl: 0.0,
            inner_steps: 5,
            alpha: 0.01,
            beta1: 0.001,
            beta2: 0.001,
            finetune_scope: Scope::Full,
            robust: RobustSpec::at(AttackConfig::pgd(2.0, 10)),
            tasks_per_batch: 4,
            epochs: 6,
            batches_per_epoch: 100,
            seed: 0,
            first_order: false,
            outer_optimizer: OuterOptimizer::Sgd,
            contrastive: ContrastiveConfig::default(),
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and > 0, got {v}")))
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        non_negative("gamma_in", self.gamma_in)?;
        non_negative("gamma_cl", self.gamma_cl)?;
        if !(self.gamma_out >= 0.0) {
            return Err(Error::Config(format!("gamma_out must be >= 0 or inf, got {}", self.gamma_out)));
        }
        positive("alpha", self.alpha)?;
        positive("beta1", self.beta1)?;
        positive("beta2", self.beta2)?;
        if self.tasks_per_batch == 0 {
            return Err(Error::Config("tasks_per_batch must be >= 1".into()));
        }
        if self.gamma_cl > 0.0 {
            positive("contrastive.tau", self.contrastive.tau)?;
        }
        self.robust.validate()
    }

    pub fn is_adversarial_querying(&self) -> bool {
        self.gamma_out == f64::INFINITY
    }

    pub fn inner(&self) -> InnerConfig {
        InnerConfig {
            steps: self.inner_steps,
            alpha: self.alpha,
            scope: self.finetune_scope,
            gamma_in: self.gamma_in,
            robust: self.robust,
        }
    }
}

/// Settings of one fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    pub steps: usize,
    pub alpha: f64,
    pub scope: Scope,
    pub gamma_in: f64,
    pub robust: RobustSpec,
}

#[derive(Debug, Clone)]
pub struct FineTuneResult {
    pub adapted: Var,
    /// Support loss before each of the K steps.
    pub inner_losses: Vec<f64>,
}

/// K gradient steps on `ℓ(·; support) + γ_in R(·; support)` from `w`.
///
/// With `track_grad` every step stays on the tape, so `adapted` is
/// differentiable through the whole loop (second order). Without it the step
/// directions are constants and `∂adapted/∂w` is the identity.
pub fn inner_finetune<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Network,
    w: Var,
    support: &LabeledBatch,
    cfg: &InnerConfig,
    track_grad: bool,
    rng: &mut R,
) -> Result<FineTuneResult> {
    if support.is_empty() {
        return Err(Error::Empty("support set"));
    }
    let mask = match cfg.scope {
        Scope::Full => None,
        Scope::HeadOnly => Some(g.constant(net.head_mask())),
    };
    let x = g.constant(support.x.clone());
    let mut cur = w;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let logits = net.logits(g, cur, x)?;
        let mut loss = cross_entropy(g, logits, &support.y)?;
        if cfg.gamma_in > 0.0 {
            let r = robust_objective(g, net, cur, &support.x, &support.y, None, &cfg.robust, rng)?;
            let weighted = g.scale(r, cfg.gamma_in)?;
            loss = g.add(loss, weighted)?;
        }
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { context: "inner fine-tuning", step });
        }
        losses.push(value);
        let grad = g.grad(loss, &[cur], track_grad)?[0];
        if !g.value(grad).is_finite() {
            return Err(Error::NonFiniteGradient { context: "inner fine-tuning", step });
        }
        let grad = match mask {
            Some(m) => g.mul(grad, m)?,
            None => grad,
        };
        let update = g.scale(grad, cfg.alpha)?;
        cur = g.sub(cur, update)?;
    }
    Ok(FineTuneResult { adapted: cur, inner_losses: losses })
}

/// Per-task query terms on the graph, unweighted.
#[derive(Debug, Clone)]
pub struct TaskTerms {
    pub clean: Var,
    pub robust: Option<Var>,
    pub cl: Option<Var>,
    pub inner_losses: Vec<f64>,
}

fn task_rng(cfg: &MetaConfig, step: u64, task: usize, which: u64) -> ChaCha8Rng {
    rng_for(cfg.seed, &[step, task as u64, which])
}

/// Fine-tunes on the support set and builds the query terms of one task.
pub fn task_terms(
    g: &mut Graph,
    net: &Network,
    w: Var,
    episode: &Episode,
    cfg: &MetaConfig,
    step: u64,
    task: usize,
) -> Result<TaskTerms> {
    if episode.query.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let mut inner_rng = task_rng(cfg, step, task, stream::INNER_ATTACK);
    let ft = inner_finetune(g, net, w, &episode.support, &cfg.inner(), !cfg.first_order, &mut inner_rng)?;
    let adapted = ft.adapted;
    let q = &episode.query;

    let xq = g.constant(q.x.clone());
    let logits = net.logits(g, adapted, xq)?;
    let clean = cross_entropy(g, logits, &q.y)?;

    let mut robust_adv = None;
    let robust = if cfg.gamma_out > 0.0 {
        let mut rng = task_rng(cfg, step, task, stream::OUTER_ATTACK);
        let unlabeled = match cfg.robust.kind {
            RobustKind::Trades => episode.unlabeled.as_ref(),
            RobustKind::At => None,
        };
        let reg = regularizer(g, net, adapted, &q.x, &q.y, unlabeled, &cfg.robust, &mut rng)?;
        let mut value = reg.value;
        if cfg.robust.lambda > 0.0 {
            let ce = g.scale(clean, cfg.robust.lambda)?;
            value = g.add(ce, value)?;
        }
        if cfg.robust.kind == RobustKind::At {
            robust_adv = Some(reg.x_adv);
        }
        Some(value)
    } else {
        None
    };

    let cl = if cfg.gamma_cl > 0.0 {
        let ccfg = &cfg.contrastive;
        let dims = net.spec().input_dims;
        let mut vrng = task_rng(cfg, step, task, stream::VIEWS);
        let views = make_views(&q.x, dims, &ccfg.transforms, &mut vrng)?;
        let mut parts = vec![views.anchors.clone(), views.positives];
        if ccfg.adversarial_views {
            let adv = match robust_adv {
                Some(x) => x,
                None => {
                    let mut arng = task_rng(cfg, step, task, stream::CL_ATTACK);
                    let params = g.value(adapted).clone();
                    adversarial_views(net, &params, &q.x, &q.y, &cfg.robust.attack, &mut arng)?
                }
            };
            parts.push(adv);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let rows = Tensor::concat_rows(&refs)?;
        let b = q.len();
        let groups: Vec<usize> = (0..rows.shape()[0]).map(|i| i % b).collect();
        let xv = g.constant(rows);
        let reps = net.representation(g, adapted, xv)?;
        Some(contrastive_loss(g, reps, &groups, ccfg.tau, ccfg.normalize)?)
    } else {
        None
    };

    Ok(TaskTerms { clean, robust, cl, inner_losses: ft.inner_losses })
}

/// Weighted sum of the terms entering the clean and the robust gradient.
fn split_terms(g: &mut Graph, t: &TaskTerms, cfg: &MetaConfig) -> Result<(Option<Var>, Option<Var>)> {
    let aq = cfg.is_adversarial_querying();
    let clean = if aq { None } else { Some(t.clean) };
    let mut robust = match t.robust {
        Some(r) if aq => Some(r),
        Some(r) => Some(g.scale(r, cfg.gamma_out)?),
        None => None,
    };
    if let Some(c) = t.cl {
        let wc = g.scale(c, cfg.gamma_cl)?;
        robust = Some(match robust {
            Some(r) => g.add(r, wc)?,
            None => wc,
        });
    }
    Ok((clean, robust))
}

/// The meta objective over a task batch, with each term averaged over tasks.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub clean: Var,
    pub robust: Option<Var>,
    pub cl: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub total: f64,
    pub clean: f64,
    pub robust: Option<f64>,
    pub cl: Option<f64>,
}

impl Objective {
    pub fn values(&self, g: &Graph) -> Breakdown {
        Breakdown {
            total: g.value(self.total).item(),
            clean: g.value(self.clean).item(),
            robust: self.robust.map(|v| g.value(v).item()),
            cl: self.cl.map(|v| g.value(v).item()),
        }
    }
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    g.scale(acc, 1.0 / vars.len() as f64)
}

/// Builds the whole meta objective for `tasks` on one graph. `step` keys the
/// per-task random streams.
pub fn meta_objective(
    g: &mut Graph,
    net: &Network,
    w: Var,
    tasks: &[Episode],
    cfg: &MetaConfig,
    step: u64,
) -> Result<Objective> {
    if tasks.is_empty() {
        return Err(Error::Empty("task batch"));
    }
    cfg.validate()?;
    let mut cleans = Vec::with_capacity(tasks.len());
    let mut robusts = Vec::new();
    let mut cls = Vec::new();
    let mut totals = Vec::with_capacity(tasks.len());
    for (i, ep) in tasks.iter().enumerate() {
        let t = task_terms(g, net, w, ep, cfg, step, i)?;
        let (c, r) = split_terms(g, &t, cfg)?;
        totals.push(match (c, r) {
            (Some(c), Some(r)) => g.add(c, r)?,
            (Some(c), None) => c,
            (None, Some(r)) => r,
            (None, None) => return Err(Error::Config("objective has no active term".into())),
        });
        cleans.push(t.clean);
        robusts.extend(t.robust);
        cls.extend(t.cl);
    }
    Ok(Objective {
        total: mean_of(g, &totals)?,
        clean: mean_of(g, &cleans)?,
        robust: if robusts.is_empty() { None } else { Some(mean_of(g, &robusts)?) },
        cl: if cls.is_empty() { None } else { Some(mean_of(g, &cls)?) },
    })
}

/// Task-averaged gradients of the clean and robust(+contrastive) parts.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub clean: Option<Tensor>,
    pub robust: Option<Tensor>,
    pub breakdown: Breakdown,
}

struct TaskGrad {
    clean: Option<Tensor>,
    robust: Option<Tensor>,
    clean_value: f64,
    robust_value: Option<f64>,
    cl_value: Option<f64>,
    total: f64,
}

fn task_gradient(net: &Network, params: &Tensor, ep: &Episode, cfg: &MetaConfig, step: u64, task: usize) -> Result<TaskGrad> {
    let mut g = Graph::new();
    let w = g.param(params.clone());
    let t = task_terms(&mut g, net, w, ep, cfg, step, task)?;
    let (c, r) = split_terms(&mut g, &t, cfg)?;
    let mut total = 0.0;
    let mut grad_of = |g: &mut Graph, v: Option<Var>| -> Result<Option<Tensor>> {
        let Some(v) = v else { return Ok(None) };
        total += g.value(v).item();
        let gv = g.grad(v, &[w], false)?[0];
        Ok(Some(g.value(gv).clone()))
    };
    let clean = grad_of(&mut g, c)?;
    let robust = grad_of(&mut g, r)?;
    Ok(TaskGrad {
        clean,
        robust,
        clean_value: g.value(t.clean).item(),
        robust_value: t.robust.map(|v| g.value(v).item()),
        cl_value: t.cl.map(|v| g.value(v).item()),
        total,
    })
}

fn accumulate(acc: &mut Option<Tensor>, g: Option<Tensor>) {
    if let Some(g) = g {
        match acc {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => *acc = Some(g),
        }
    }
}

/// Meta-gradients with tasks differentiated independently (possibly in
/// parallel) and reduced in task order.
pub fn meta_gradient<E: Executor>(
    model: &MetaModel,
    tasks: &[Episode],
    cfg: &MetaConfig,
    step: u64,
    exec: &E,
) -> Result<MetaGradient> {
    if tasks.is_empty() {
        return Err(Error::Empty("task batch"));
    }
    cfg.validate()?;
    let per_task = exec.map(tasks.len(), &|i| task_gradient(&model.net, &model.params, &tasks[i], cfg, step, i));
    let n = tasks.len() as f64;
    let (mut gc, mut gr) = (None, None);
    let (mut clean, mut total) = (0.0, 0.0);
    let (mut robust, mut cl): (Option<f64>, Option<f64>) = (None, None);
    for r in per_task {
        let t = r?;
        accumulate(&mut gc, t.clean);
        accumulate(&mut gr, t.robust);
        clean += t.clean_value;
        total += t.total;
        if let Some(v) = t.robust_value {
            robust = Some(robust.unwrap_or(0.0) + v);
        }
        if let Some(v) = t.cl_value {
            cl = Some(cl.unwrap_or(0.0) + v);
        }
    }
    let scale = |t: Option<Tensor>| {
        t.map(|mut t| {
            t.data_mut().iter_mut().for_each(|v| *v /= n);
            t
        })
    };
    let out = MetaGradient {
        clean: scale(gc),
        robust: scale(gr),
        breakdown: Breakdown {
            total: total / n,
            clean: clean / n,
            robust: robust.map(|v| v / n),
            cl: cl.map(|v| v / n),
        },
    };
    for g in out.clean.iter().chain(out.robust.iter()) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { context: "meta-update", step: step as usize });
        }
    }
    Ok(out)
}

/// Outer-optimizer state carried across meta steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OuterState {
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub breakdown: Breakdown,
    pub grad_norm_clean: Option<f64>,
    pub grad_norm_robust: Option<f64>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Applies a meta-gradient to `params`.
pub fn apply_update(params: &Tensor, grad: &MetaGradient, cfg: &MetaConfig, state: &mut OuterState) -> Tensor {
    let mut p = params.clone();
    let n = p.numel();
    let zero = vec![0.0; n];
    let gc = grad.clean.as_ref().map_or(&zero[..], |t| t.data());
    let gr = grad.robust.as_ref().map_or(&zero[..], |t| t.data());
    state.steps += 1;
    match cfg.outer_optimizer {
        OuterOptimizer::Sgd => {
            for (i, v) in p.data_mut().iter_mut().enumerate() {
                if grad.clean.is_some() {
                    *v -= cfg.beta1 * gc[i];
                }
                if grad.robust.is_some() {
                    *v -= cfg.beta2 * gr[i];
                }
            }
        }
        OuterOptimizer::Adam => {
            if state.m.len() != n {
                state.m = vec![0.0; n];
                state.v = vec![0.0; n];
            }
            let t = state.steps as i32;
            let c1 = 1.0 - libm::pow(ADAM_B1, t as f64);
            let c2 = 1.0 - libm::pow(ADAM_B2, t as f64);
            let ratio = cfg.beta2 / cfg.beta1;
            for (i, v) in p.data_mut().iter_mut().enumerate() {
                let d = gc[i] + ratio * gr[i];
                state.m[i] = ADAM_B1 * state.m[i] + (1.0 - ADAM_B1) * d;
                state.v[i] = ADAM_B2 * state.v[i] + (1.0 - ADAM_B2) * d * d;
                let mh = state.m[i] / c1;
                let vh = state.v[i] / c2;
                *v -= cfg.beta1 * mh / (libm::sqrt(vh) + ADAM_EPS);
            }
        }
    }
    p
}

/// One meta-update on a task batch.
pub fn meta_step<E: Executor>(
    model: &MetaModel,
    tasks: &[Episode],
    cfg: &MetaConfig,
    state: &mut OuterState,
    step: u64,
    exec: &E,
) -> Result<(MetaModel, StepMetrics)> {
    let grad = meta_gradient(model, tasks, cfg, step, exec)?;
    let params = apply_update(&model.params, &grad, cfg, state);
    let metrics = StepMetrics {
        breakdown: grad.breakdown,
        grad_norm_clean: grad.clean.as_ref().map(Tensor::norm),
        grad_norm_robust: grad.robust.as_ref().map(Tensor::norm),
    };
    Ok((model.with_params(params)?, metrics))
}

/// Source of meta-training task batches.
pub trait TaskSource {
    fn batch(&self, epoch: usize, index: usize) -> Result<Vec<Episode>>;
}

impl TaskSource for crate::tasks::EpisodeStream<'_> {
    fn batch(&self, epoch: usize, index: usize) -> Result<Vec<Episode>> {
        crate::tasks::EpisodeStream::batch(self, epoch, index)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub clean_term: f64,
    pub robust_term: Option<f64>,
    pub cl_term: Option<f64>,
    pub grad_norm_clean: Option<f64>,
    pub grad_norm_robust: Option<f64>,
}

/// Runs `cfg.batches_per_epoch` meta-steps of epoch `epoch`.
pub fn train_epoch<S: TaskSource, E: Executor>(
    model: MetaModel,
    source: &S,
    cfg: &MetaConfig,
    state: &mut OuterState,
    epoch: usize,
    exec: &E,
) -> Result<(MetaModel, Vec<LogRecord>)> {
    let mut model = model;
    let mut log = Vec::with_capacity(cfg.batches_per_epoch);
    for b in 0..cfg.batches_per_epoch {
        let tasks = source.batch(epoch, b)?;
        let step = (epoch * cfg.batches_per_epoch + b) as u64;
        let (next, m) = meta_step(&model, &tasks, cfg, state, step, exec)?;
        model = next;
        log.push(LogRecord {
            epoch,
            batch: b,
            total: m.breakdown.total,
            clean_term: m.breakdown.clean,
            robust_term: m.breakdown.robust,
            cl_term: m.breakdown.cl,
            grad_norm_clean: m.grad_norm_clean,
            grad_norm_robust: m.grad_norm_robust,
        });
    }
    Ok((model, log))
}

/// `cfg.epochs × cfg.batches_per_epoch` meta-steps from `w0`.
pub fn train<S: TaskSource, E: Executor>(
    w0: MetaModel,
    source: &S,
    cfg: &MetaConfig,
    exec: &E,
) -> Result<(MetaModel, Vec<LogRecord>)> {
    cfg.validate()?;
    let mut state = OuterState::default();
    let mut model = w0;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let (next, l) = train_epoch(model, source, cfg, &mut state, epoch, exec)?;
        model = next;
        log.extend(l);
    }
    Ok((model, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMode {
    #[default]
    Standard,
    /// Adds the AT regularizer to the support loss.
    Adversarial,
}

/// Test-time fine-tuning settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub mode: FineTuneMode,
    pub scope: Scope,
    pub steps: usize,
    pub alpha: f64,
    /// Weight of the AT regularizer in adversarial mode.
    pub adversarial_gamma: f64,
    /// Attack used inside adversarial fine-tuning.
    pub finetune_attack: AttackConfig,
    pub seed: u64,
}

impl TestConfig {
    /// Defaults derived from a training config: same step size and scope, 10
    /// steps, and the training `γ_out` of an AT run as adversarial strength
    /// (0.2 when training used TRADES or adversarial querying).
    pub fn from_training(cfg: &MetaConfig, mode: FineTuneMode) -> Self {
        let gamma = if cfg.robust.kind == RobustKind::At && cfg.gamma_out > 0.0 && cfg.gamma_out.is_finite() {
            cfg.gamma_out
        } else {
            0.2
        };
        TestConfig {
            mode,
            scope: cfg.finetune_scope,
            steps: 10,
            alpha: cfg.alpha,
            adversarial_gamma: gamma,
            finetune_attack: cfg.robust.attack,
            seed: cfg.seed,
        }
    }

    pub fn inner(&self) -> InnerConfig {
        InnerConfig {
            steps: self.steps,
            alpha: self.alpha,
            scope: self.scope,
            gamma_in: match self.mode {
                FineTuneMode::Standard => 0.0,
                FineTuneMode::Adversarial => self.adversarial_gamma,
            },
            robust: RobustSpec::at(self.finetune_attack),
        }
    }
}

/// Fine-tuned parameters for one test task.
pub fn adapt(model: &MetaModel, support: &LabeledBatch, test: &TestConfig, task: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = g.param(model.params.clone());
    let mut rng = rng_for(test.seed, &[stream::TEST_FT_ATTACK, task as u64]);
    let ft = inner_finetune(&mut g, &model.net, w, support, &test.inner(), false, &mut rng)?;
    Ok(g.value(ft.adapted).clone())
}

/// Fine-tune on each task's support set, then measure query accuracy clean
/// (ε = 0 row) and under `eval_attack`.
pub fn meta_test<E: Executor>(
    model: &MetaModel,
    tasks: &[Episode],
    test: &TestConfig,
    eval_attack: &AttackConfig,
    exec: &E,
) -> Result<EvalReport> {
    let mut eps = vec![0.0];
    if eval_attack.epsilon > 0.0 {
        eps.push(eval_attack.epsilon);
    }
    sweep(model, tasks, test, &eps, eval_attack, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ArchSpec};

    fn tiny() -> MetaModel {
        MetaModel::init(
            ArchSpec {
                input_dims: (2, 2, 1),
                hidden: vec![],
                embed_dim: 3,
                n_classes: 2,
                activation: Activation::Tanh,
            },
            1,
        )
        .unwrap()
    }

    fn support() -> LabeledBatch {
        LabeledBatch {
            x: Tensor::new(vec![2, 4], vec![10.0, 200.0, 30.0, 90.0, 250.0, 0.0, 120.0, 60.0]).unwrap(),
            y: vec![0, 1],
        }
    }

    #[test]
    fn zero_steps_return_w() {
        let m = tiny();
        let mut g = Graph::new();
        let w = g.param(m.params.clone());
        let cfg = InnerConfig { steps: 0, ..MetaConfig::default().inner() };
        let ft = inner_finetune(&mut g, &m.net, w, &support(), &cfg, true, &mut rng_for(0, &[])).unwrap();
        assert_eq!(ft.adapted, w);
        assert!(ft.inner_losses.is_empty());
    }

    #[test]
    fn head_only_keeps_representation_bitwise() {
        let m = tiny();
        let mut g = Graph::new();
        let w = g.param(m.params.clone());
        let cfg = InnerConfig { steps: 5, alpha: 0.5, scope: Scope::HeadOnly, ..MetaConfig::default().inner() };
        let ft = inner_finetune(&mut g, &m.net, w, &support(), &cfg, true, &mut rng_for(0, &[])).unwrap();
        let split = m.net.head_offset();
        let out = g.value(ft.adapted);
        assert_eq!(&out.data()[..split], &m.params.data()[..split]);
        assert_ne!(&out.data()[split..], &m.params.data()[split..]);
    }

    #[test]
    fn inner_trace_has_k_entries_and_decreases_for_small_alpha() {
        let m = tiny();
        let mut g = Graph::new();
        let w = g.param(m.params.clone());
        let cfg = InnerConfig { steps: 6, alpha: 0.05, ..MetaConfig::default().inner() };
        let ft = inner_finetune(&mut g, &m.net, w, &support(), &cfg, false, &mut rng_for(0, &[])).unwrap();
        assert_eq!(ft.inner_losses.len(), 6);
        assert!(ft.inner_losses.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(MetaConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(MetaConfig { gamma_out: f64::NAN, ..Default::default() }.validate().is_err());
        assert!(MetaConfig { gamma_out: f64::INFINITY, ..Default::default() }.validate().is_ok());
    }
}
