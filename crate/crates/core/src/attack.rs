//! ℓ∞-bounded input perturbations: multi-step PGD and one-step FGSM.
//!
//! Both attacks work on a batch `x` in pixel units `[0, 255]` and return a
//! perturbation `δ` of the same shape with `|δ_j| <= ε` and
//! `0 <= x_j + δ_j <= 255` for every coordinate.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::PIXEL_MAX;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pgd,
    Fgsm,
}

/// How the single FGSM step uses the input gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgsmDirection {
    /// `δ0 + step_size · sign(∇)`, clipped to the ball.
    #[default]
    Sign,
    /// `δ0 + ε · ∇` as literally typeset, still projected onto the ball.
    RawGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Radius of the ℓ∞ ball in pixel levels (ε = 2 means 2/255 of full scale).
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_init: bool,
    /// Multiplicative step-size schedule; 1.0 keeps the step fixed.
    #[serde(default = "one")]
    pub step_decay: f64,
    #[serde(default)]
    pub fgsm_direction: FgsmDirection,
}

fn one() -> f64 {
    1.0
}

impl AttackConfig {
    /// PGD with the `2.5 ε / steps` step heuristic and a random start.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            steps,
            step_size: if steps == 0 { 0.0 } else { 2.5 * epsilon / steps as f64 },
            random_init: true,
            step_decay: 1.0,
            fgsm_direction: FgsmDirection::Sign,
        }
    }

    /// Fast one-step attack from a uniform random start, step `1.25 ε`.
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: 1.25 * epsilon,
            random_init: true,
            step_decay: 1.0,
            fgsm_direction: FgsmDirection::Sign,
        }
    }

    /// Same attack at a different radius, rescaling the step size.
    pub fn at_epsilon(&self, epsilon: f64) -> Self {
        let step_size = if self.epsilon > 0.0 {
            self.step_size * epsilon / self.epsilon
        } else {
            match self.kind {
                AttackKind::Pgd => AttackConfig::pgd(epsilon, self.steps).step_size,
                AttackKind::Fgsm => 1.25 * epsilon,
            }
        };
        AttackConfig {
            epsilon,
            step_size,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("attack epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && self.epsilon > 0.0 && !(self.step_size > 0.0) {
            return Err(Error::Config(format!("attack step_size must be > 0, got {}", self.step_size)));
        }
        if self.kind == AttackKind::Fgsm && self.steps != 1 {
            return Err(Error::Config(format!("FGSM takes exactly one step, got steps = {}", self.steps)));
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(Error::Config(format!("step_decay must be in (0, 1], got {}", self.step_decay)));
        }
        Ok(())
    }
}

/// A differentiable scalar objective of the (perturbed) input batch.
pub trait AttackObjective {
    fn loss(&self, g: &mut Graph, x_adv: Var) -> Result<Var>;
}

impl<F> AttackObjective for F
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    fn loss(&self, g: &mut Graph, x_adv: Var) -> Result<Var> {
        self(g, x_adv)
    }
}

/// Clamps `δ_j` into `[max(-ε, -x_j), min(ε, 255 - x_j)]`, so both the
/// ε-ball and the pixel range hold exactly in floating point.
pub fn project(delta: &mut Tensor, x: &Tensor, epsilon: f64) {
    for (d, &xj) in delta.data_mut().iter_mut().zip(x.data()) {
        let lo = f64::max(-epsilon, -xj);
        let hi = f64::min(epsilon, PIXEL_MAX - xj);
        let mut v = d.clamp(lo, hi.max(lo));
        while xj + v > PIXEL_MAX {
            v = v.next_down();
        }
        while xj + v < 0.0 {
            v = v.next_up();
        }
        *d = v;
    }
}

/// `x + δ` as a new tensor.
pub fn perturbed(x: &Tensor, delta: &Tensor) -> Tensor {
    let data = x.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Uniform draw from `[-ε, ε]` per coordinate.
pub fn uniform_start<R: Rng + ?Sized>(shape: &[usize], epsilon: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product::<usize>();
    let data: Vec<f64> = (0..n)
        .map(|_| if epsilon > 0.0 { rng.random_range(-epsilon..=epsilon) } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Gradient of the objective with respect to the input at `x + δ`.
pub fn input_gradient(objective: &dyn AttackObjective, x: &Tensor, delta: &Tensor) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let xc = g.constant(x.clone());
    let d = g.param(delta.clone());
    let xa = g.add(xc, d)?;
    let loss = objective.loss(&mut g, xa)?;
    let grad = g.grad(loss, &[d], false)?[0];
    Ok((g.value(loss).item(), g.value(grad).clone()))
}

fn start<R: Rng + ?Sized>(x: &Tensor, cfg: &AttackConfig, rng: &mut R) -> Tensor {
    let mut delta = if cfg.random_init {
        uniform_start(x.shape(), cfg.epsilon, rng)
    } else {
        Tensor::zeros(x.shape())
    };
    project(&mut delta, x, cfg.epsilon);
    delta
}

/// Projected sign-gradient ascent: exactly `cfg.steps` steps, each followed
/// by projection onto the ε-ball and the pixel range.
pub fn pgd_attack<R: Rng + ?Sized>(
    objective: &dyn AttackObjective,
    x: &Tensor,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.kind != AttackKind::Pgd {
        return Err(Error::Config("pgd_attack called with a non-PGD config".into()));
    }
    if cfg.epsilon == 0.0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let mut delta = start(x, cfg, rng);
    let mut step_size = cfg.step_size;
    for step in 0..cfg.steps {
        let (_, grad) = input_gradient(objective, x, &delta)?;
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient { context: "PGD attack", step });
        }
        for (d, gj) in delta.data_mut().iter_mut().zip(grad.data()) {
            *d += step_size * crate::autodiff::sign(*gj);
        }
        project(&mut delta, x, cfg.epsilon);
        step_size *= cfg.step_decay;
    }
    Ok(delta)
}

/// One-step attack from a (uniform random or zero) start; exactly one
/// gradient evaluation, taken at the starting point.
pub fn fgsm_attack<R: Rng + ?Sized>(
    objective: &dyn AttackObjective,
    x: &Tensor,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.kind != AttackKind::Fgsm {
        return Err(Error::Config("fgsm_attack called with a non-FGSM config".into()));
    }
    if cfg.epsilon == 0.0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let mut delta = start(x, cfg, rng);
    let (_, grad) = input_gradient(objective, x, &delta)?;
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient { context: "FGSM attack", step: 0 });
    }
    for (d, gj) in delta.data_mut().iter_mut().zip(grad.data()) {
        *d += match cfg.fgsm_direction {
            FgsmDirection::Sign => cfg.step_size * crate::autodiff::sign(*gj),
            FgsmDirection::RawGradient => cfg.epsilon * gj,
        };
    }
    project(&mut delta, x, cfg.epsilon);
    Ok(delta)
}

/// Dispatches on `cfg.kind`.
pub fn attack<R: Rng + ?Sized>(
    objective: &dyn AttackObjective,
    x: &Tensor,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    match cfg.kind {
        AttackKind::Pgd => pgd_attack(objective, x, cfg, rng),
        AttackKind::Fgsm => fgsm_attack(objective, x, cfg, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn linear(coef: f64) -> impl Fn(&mut Graph, Var) -> Result<Var> {
        move |g: &mut Graph, x: Var| {
            let s = g.sum(x)?;
            g.scale(s, coef)
        }
    }

    fn objective_value(obj: &dyn AttackObjective, x: &Tensor) -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let l = obj.loss(&mut g, xv).unwrap();
        g.value(l).item()
    }

    #[test]
    fn zero_epsilon_is_the_identity() {
        let mut rng = rng_for(0, &[]);
        let x = Tensor::vector(vec![10.0, 200.0]);
        for cfg in [AttackConfig::pgd(0.0, 10), AttackConfig::fgsm(0.0)] {
            let d = attack(&linear(1.0), &x, &cfg, &mut rng).unwrap();
            assert!(d.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_objective_single_step() {
        let mut rng = rng_for(0, &[]);
        let x = Tensor::vector(vec![0.0]);
        let cfg = AttackConfig {
            step_size: 0.1,
            random_init: false,
            ..AttackConfig::pgd(0.1, 1)
        };
        let obj = linear(3.0);
        let d = pgd_attack(&obj, &x, &cfg, &mut rng).unwrap();
        assert!((d.item() - 0.1).abs() < 1e-15);
        let gain = objective_value(&obj, &perturbed(&x, &d)) - objective_value(&obj, &x);
        assert!((gain - 0.3).abs() < 1e-12);
    }

    #[test]
    fn fgsm_zero_gradient_and_saturation() {
        let mut rng = rng_for(3, &[]);
        let x = Tensor::vector(vec![50.0, 60.0, 70.0]);
        let flat = |g: &mut Graph, x: Var| {
            let z = g.scale(x, 0.0)?;
            g.sum(z)
        };
        let cfg = AttackConfig {
            random_init: false,
            ..AttackConfig::fgsm(4.0)
        };
        let d = fgsm_attack(&flat, &x, &cfg, &mut rng).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        let d = fgsm_attack(&linear(2.0), &x, &cfg, &mut rng).unwrap();
        assert!(d.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn uniform_start_stays_in_the_ball() {
        let mut rng = rng_for(11, &[]);
        let eps = 3.0;
        let d = uniform_start(&[10_000], eps, &mut rng);
        assert!(d.data().iter().all(|v| v.abs() <= eps));
        assert!(d.data().iter().any(|&v| v > 2.9) && d.data().iter().any(|&v| v < -2.9));
    }

    #[test]
    fn pgd_respects_pixel_range() {
        let mut rng = rng_for(1, &[]);
        let x = Tensor::vector(vec![0.0, 254.5, 255.0, 128.0]);
        let d = pgd_attack(&linear(-1.0), &x, &AttackConfig::pgd(8.0, 5), &mut rng).unwrap();
        for (xj, dj) in x.data().iter().zip(d.data()) {
            assert!((0.0..=255.0).contains(&(xj + dj)));
            assert!(dj.abs() <= 8.0);
        }
        assert_eq!(d.data()[0], 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut rng = rng_for(1, &[]);
        let x = Tensor::vector(vec![1.0]);
        let bad = |g: &mut Graph, x: Var| {
            let z = g.scale(x, 0.0)?;
            let l = g.log(z)?;
            g.sum(l)
        };
        let cfg = AttackConfig {
            random_init: false,
            ..AttackConfig::pgd(1.0, 3)
        };
        let err = pgd_attack(&bad, &x, &cfg, &mut rng).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient { context: "PGD attack", step: 0 });
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::pgd(-1.0, 3).validate().is_err());
        let mut f = AttackConfig::fgsm(2.0);
        f.steps = 2;
        assert!(f.validate().is_err());
        assert!(AttackConfig::pgd(2.0, 10).validate().is_ok());
        assert!((AttackConfig::pgd(2.0, 10).step_size - 0.5).abs() < 1e-15);
        assert!((AttackConfig::fgsm(2.0).step_size - 2.5).abs() < 1e-15);
    }
}
