//! Robust regularization `R(w; D) = E[max_{‖δ‖∞≤ε} g(w; x + δ, y)]`.
//!
//! Two choices of `g`: AT uses the prediction loss itself, TRADES uses a
//! divergence between the clean and perturbed prediction distributions (and
//! therefore needs no labels). The maximizer `δ*` is computed by the
//! configured attack against the current parameter values and then enters
//! the objective as a constant.

use alloc::format;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{attack, perturbed, AttackConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustKind {
    At,
    Trades,
}

/// Divergence used by TRADES between `p(x)` and `p(x + δ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// `KL(p(x) ‖ p(x + δ))`
    #[default]
    Kl,
    /// `-Σ p(x) log p(x + δ)`; differs from KL by the entropy of `p(x)`.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustSpec {
    pub kind: RobustKind,
    /// Weight of the clean loss next to the regularizer.
    pub lambda: f64,
    pub attack: AttackConfig,
    #[serde(default)]
    pub divergence: Divergence,
}

impl RobustSpec {
    pub fn at(attack: AttackConfig) -> Self {
        RobustSpec {
            kind: RobustKind::At,
            lambda: 0.0,
            attack,
            divergence: Divergence::Kl,
        }
    }

    pub fn trades(attack: AttackConfig) -> Self {
        RobustSpec {
            kind: RobustKind::Trades,
            lambda: 0.0,
            attack,
            divergence: Divergence::Kl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        self.attack.validate()
    }
}

/// A regularizer value together with the adversarial inputs it was computed at.
#[derive(Debug, Clone)]
pub struct Regularized {
    pub value: Var,
    pub x_adv: Tensor,
}

/// Mean cross-entropy of the network at `x`, parameters held as constants.
fn frozen_ce<'a>(
    net: &'a Network,
    params: &Tensor,
    labels: &'a [usize],
) -> impl Fn(&mut Graph, Var) -> Result<Var> + 'a {
    let params = params.clone();
    move |g: &mut Graph, x: Var| {
        let w = g.constant(params.clone());
        let logits = net.logits(g, w, x)?;
        cross_entropy(g, logits, labels)
    }
}

fn divergence(g: &mut Graph, clean_logp: Var, adv_logits: Var, div: Divergence) -> Result<Var> {
    let rows = g.shape(adv_logits)[0] as f64;
    let logq = g.log_softmax(adv_logits)?;
    let p = g.exp(clean_logp)?;
    let inner = match div {
        Divergence::Kl => {
            let gap = g.sub(clean_logp, logq)?;
            g.mul(p, gap)?
        }
        Divergence::CrossEntropy => {
            let t = g.mul(p, logq)?;
            g.neg(t)?
        }
    };
    let total = g.sum(inner)?;
    g.scale(total, 1.0 / rows)
}

/// AT regularizer: cross-entropy at `x + δ*`, δ* attacking that same loss.
pub fn at_regularizer<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Network,
    w: Var,
    x: &Tensor,
    labels: &[usize],
    spec: &RobustSpec,
    rng: &mut R,
) -> Result<Regularized> {
    if spec.kind != RobustKind::At {
        return Err(Error::Config("at_regularizer needs an AT spec".into()));
    }
    let params = g.value(w).clone();
    let objective = frozen_ce(net, &params, labels);
    let delta = attack(&objective, x, &spec.attack, rng)?;
    let x_adv = perturbed(x, &delta);
    let xa = g.constant(x_adv.clone());
    let logits = net.logits(g, w, xa)?;
    let value = cross_entropy(g, logits, labels)?;
    Ok(Regularized { value, x_adv })
}

/// TRADES regularizer: divergence between `p(x)` and `p(x + δ*)`, δ*
/// maximizing that divergence. Labels are accepted but never read.
pub fn trades_regularizer<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Network,
    w: Var,
    x: &Tensor,
    _labels: Option<&[usize]>,
    spec: &RobustSpec,
    rng: &mut R,
) -> Result<Regularized> {
    if spec.kind != RobustKind::Trades {
        return Err(Error::Config("trades_regularizer needs a TRADES spec".into()));
    }
    let params = g.value(w).clone();
    let clean_logp = {
        let mut cg = Graph::new();
        let wc = cg.constant(params.clone());
        let xc = cg.constant(x.clone());
        let logits = net.logits(&mut cg, wc, xc)?;
        let lp = cg.log_softmax(logits)?;
        cg.value(lp).clone()
    };
    let div = spec.divergence;
    let objective = |ag: &mut Graph, xa: Var| {
        let wc = ag.constant(params.clone());
        let lp = ag.constant(clean_logp.clone());
        let logits = net.logits(ag, wc, xa)?;
        divergence(ag, lp, logits, div)
    };
    let delta = attack(&objective, x, &spec.attack, rng)?;
    let x_adv = perturbed(x, &delta);

    let xc = g.constant(x.clone());
    let clean_logits = net.logits(g, w, xc)?;
    let clean_logp = g.log_softmax(clean_logits)?;
    let xa = g.constant(x_adv.clone());
    let adv_logits = net.logits(g, w, xa)?;
    let value = divergence(g, clean_logp, adv_logits, div)?;
    Ok(Regularized { value, x_adv })
}

/// Regularizer of the configured kind on a labeled batch plus optional
/// unlabeled rows (TRADES only).
pub fn regularizer<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Network,
    w: Var,
    x: &Tensor,
    labels: &[usize],
    unlabeled: Option<&Tensor>,
    spec: &RobustSpec,
    rng: &mut R,
) -> Result<Regularized> {
    match (spec.kind, unlabeled) {
        (RobustKind::At, Some(_)) => Err(Error::Config(
            "unlabeled data can only be used with TRADES regularization".into(),
        )),
        (RobustKind::At, None) => at_regularizer(g, net, w, x, labels, spec, rng),
        (RobustKind::Trades, None) => trades_regularizer(g, net, w, x, Some(labels), spec, rng),
        (RobustKind::Trades, Some(u)) => {
            let all = Tensor::concat_rows(&[x, u])?;
            trades_regularizer(g, net, w, &all, None, spec, rng)
        }
    }
}

/// `λ · E[ℓ(w; x, y)] + R(w; D)` over the labeled batch and optional unlabeled rows.
pub fn robust_objective<R: Rng + ?Sized>(
    g: &mut Graph,
    net: &Network,
    w: Var,
    x: &Tensor,
    labels: &[usize],
    unlabeled: Option<&Tensor>,
    spec: &RobustSpec,
    rng: &mut R,
) -> Result<Var> {
    spec.validate()?;
    let reg = regularizer(g, net, w, x, labels, unlabeled, spec, rng)?;
    if spec.lambda == 0.0 {
        return Ok(reg.value);
    }
    let xc = g.constant(x.clone());
    let logits = net.logits(g, w, xc)?;
    let clean = cross_entropy(g, logits, labels)?;
    let weighted = g.scale(clean, spec.lambda)?;
    g.add(weighted, reg.value)
}
