//! Standard/robust accuracy sweeps over a test-task population and neuron
//! inversion (input attribution maps).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attack::{attack, perturbed, AttackConfig};
use crate::autodiff::{sign, Graph, Var};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::metalearn::{adapt, TestConfig};
use crate::model::{count_correct, cross_entropy, MetaModel, Network, PIXEL_MAX};
use crate::rng::{rng_for, stream};
use crate::tasks::Episode;
use crate::tensor::Tensor;

/// Half-width of the 95% normal-approximation binomial interval.
pub fn binomial_ci(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.96 * libm::sqrt((p * (1.0 - p)).max(0.0) / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub epsilon: f64,
    pub accuracy: f64,
    pub ci: f64,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// One row per ε in ascending order; the ε = 0 row is the standard accuracy.
    pub rows: Vec<EvalRow>,
    /// Free-form description of the run that produced the report.
    pub config_echo: String,
    /// Seconds, when the caller measured it.
    pub wall_time: Option<f64>,
}

impl EvalReport {
    pub fn row(&self, epsilon: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.epsilon == epsilon)
    }

    pub fn standard_accuracy(&self) -> Option<f64> {
        self.row(0.0).map(|r| r.accuracy)
    }
}

fn check_grid(epsilons: &[f64]) -> Result<()> {
    if epsilons.is_empty() {
        return Err(Error::Empty("epsilon grid"));
    }
    if epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return Err(Error::Config(format!("epsilons must be finite and >= 0: {epsilons:?}")));
    }
    if epsilons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("epsilons must be strictly ascending: {epsilons:?}")));
    }
    Ok(())
}

/// Correct query predictions of one fine-tuned task, one count per ε.
fn task_counts(
    model: &MetaModel,
    ep: &Episode,
    test: &TestConfig,
    epsilons: &[f64],
    attack_template: &AttackConfig,
    task: usize,
) -> Result<Vec<usize>> {
    let params = adapt(model, &ep.support, test, task)?;
    let net = &model.net;
    let q = &ep.query;
    let clean = count_correct(&net.eval_logits(&params, &q.x)?, &q.y);
    epsilons
        .iter()
        .map(|&eps| {
            if eps == 0.0 {
                return Ok(clean);
            }
            let cfg = attack_template.at_epsilon(eps);
            let objective = |g: &mut Graph, x: Var| {
                let w = g.constant(params.clone());
                let logits = net.logits(g, w, x)?;
                cross_entropy(g, logits, &q.y)
            };
            let mut rng = rng_for(test.seed, &[stream::EVAL_ATTACK, task as u64, eps.to_bits()]);
            let delta = attack(&objective, &q.x, &cfg, &mut rng)?;
            Ok(count_correct(&net.eval_logits(&params, &perturbed(&q.x, &delta))?, &q.y))
        })
        .collect()
}

/// Fine-tunes once per task, then measures query accuracy at every ε of the
/// grid with `attack_template` rescaled to that radius.
pub fn sweep<E: Executor>(
    model: &MetaModel,
    tasks: &[Episode],
    test: &TestConfig,
    epsilons: &[f64],
    attack_template: &AttackConfig,
    exec: &E,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::Empty("test tasks"));
    }
    check_grid(epsilons)?;
    attack_template.validate()?;
    let per_task = exec.map(tasks.len(), &|i| task_counts(model, &tasks[i], test, epsilons, attack_template, i));
    let mut sums = vec![0.0; epsilons.len()];
    for (i, counts) in per_task.into_iter().enumerate() {
        let counts = counts?;
        let q = tasks[i].query.len() as f64;
        for (s, c) in sums.iter_mut().zip(counts) {
            *s += c as f64 / q;
        }
    }
    let n = tasks.len();
    let rows = epsilons
        .iter()
        .zip(sums)
        .map(|(&epsilon, s)| {
            let accuracy = s / n as f64;
            EvalRow { epsilon, accuracy, ci: binomial_ci(accuracy, n), n_tasks: n }
        })
        .collect();
    Ok(EvalReport { rows, config_echo: String::new(), wall_time: None })
}

/// Accuracy sweep with `attack_steps`-step PGD (random start) at each ε.
pub fn ra_sweep<E: Executor>(
    model: &MetaModel,
    tasks: &[Episode],
    epsilons: &[f64],
    attack_steps: usize,
    test: &TestConfig,
    exec: &E,
) -> Result<EvalReport> {
    let template = AttackConfig::pgd(1.0, attack_steps);
    sweep(model, tasks, test, epsilons, &template, exec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AscentScheme {
    /// Take a step only if the activation does not drop; otherwise halve
    /// the step size and stay.
    #[default]
    AcceptIfImproved,
    /// Always take the signed step.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IamResult {
    pub seed_image: Tensor,
    pub inverted_image: Tensor,
    pub neuron_index: usize,
    /// Activation of the current image before the first step and after every step.
    pub objective_trace: Vec<f64>,
}

fn activation(net: &Network, params: &Tensor, img: &Tensor, neuron: usize) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let w = g.constant(params.clone());
    let x = g.param(img.clone());
    let rep = net.representation(&mut g, w, x)?;
    let onehot = {
        let d = g.shape(rep)[1];
        let mut t = vec![0.0; d];
        t[neuron] = 1.0;
        g.constant(Tensor::new(vec![1, d], t)?)
    };
    let picked = g.mul(rep, onehot)?;
    let value = g.sum(picked)?;
    let grad = g.grad(value, &[x], false)?[0];
    Ok((g.value(value).item(), g.value(grad).clone()))
}

/// Projected sign-gradient ascent on one coordinate of the encoder output,
/// keeping every pixel in `[0, 255]`.
pub fn invert_neuron(
    model: &MetaModel,
    seed_image: &Tensor,
    neuron: usize,
    steps: usize,
    step_size: f64,
    scheme: AscentScheme,
) -> Result<IamResult> {
    let embed = model.net.spec().embed_dim;
    if neuron >= embed {
        return Err(Error::Config(format!("neuron index {neuron} out of range for embed_dim {embed}")));
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::Config(format!("step_size must be > 0, got {step_size}")));
    }
    let len = model.net.spec().input_len();
    let mut img = seed_image.clone().reshaped(vec![1, len])?;
    for v in img.data_mut() {
        *v = v.clamp(0.0, PIXEL_MAX);
    }
    let (mut value, mut grad) = activation(&model.net, &model.params, &img, neuron)?;
    let mut trace = vec![value];
    let mut step = step_size;
    for k in 0..steps {
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient { context: "neuron inversion", step: k });
        }
        let mut cand = img.clone();
        for (v, g) in cand.data_mut().iter_mut().zip(grad.data()) {
            *v = (*v + step * sign(*g)).clamp(0.0, PIXEL_MAX);
        }
        let (cv, cg) = activation(&model.net, &model.params, &cand, neuron)?;
        match scheme {
            AscentScheme::Fixed => {
                img = cand;
                value = cv;
                grad = cg;
            }
            AscentScheme::AcceptIfImproved => {
                if cv >= value {
                    img = cand;
                    value = cv;
                    grad = cg;
                } else {
                    step *= 0.5;
                }
            }
        }
        trace.push(value);
    }
    Ok(IamResult {
        seed_image: seed_image.clone(),
        inverted_image: img.reshaped(seed_image.shape().to_vec())?,
        neuron_index: neuron,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_shrinks_with_task_count() {
        let a = binomial_ci(0.4, 100);
        let b = binomial_ci(0.4, 400);
        let c = binomial_ci(0.4, 1600);
        assert!((a / b - 2.0).abs() < 1e-12 && (b / c - 2.0).abs() < 1e-12);
        assert_eq!(binomial_ci(1.0, 10), 0.0);
    }

    #[test]
    fn grid_must_ascend() {
        assert!(check_grid(&[0.0, 2.0, 4.0]).is_ok());
        assert!(check_grid(&[2.0, 0.0]).is_err());
        assert!(check_grid(&[]).is_err());
        assert!(check_grid(&[-1.0]).is_err());
    }
}
