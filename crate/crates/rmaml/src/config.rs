//! Experiment configuration: a TOML file layered over a named preset.
//!
//! Resolution order: the preset named by the file's `preset` key (default
//! `maml`) supplies every field, keys present in the file replace the
//! preset's, and command-line flags replace both. Unknown keys anywhere are
//! rejected. The resolved configuration is written back as the config echo,
//! which on its own reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use rmaml_core::attack::{AttackConfig, AttackKind, FgsmDirection};
use rmaml_core::contrastive::{ContrastiveConfig, Transforms};
use rmaml_core::evaluation::AscentScheme;
use rmaml_core::metalearn::{FineTuneMode, MetaConfig, OuterOptimizer, Scope, TestConfig};
use rmaml_core::model::{Activation, ArchSpec};
use rmaml_core::regularizer::{Divergence, RobustKind, RobustSpec};
use rmaml_core::tasks::{synth_dataset, Dataset, EpisodeConfig, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::dataset_file;
use crate::error::{Result, RunError};

pub const PRESETS: [&str; 8] = [
    "maml",
    "rmaml_both",
    "rmaml_out",
    "rmaml_out_fgsm",
    "rmaml_out_anil",
    "aq",
    "rmaml_out_trades",
    "rmaml_out_cl",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for task-level parallelism; all cores when absent.
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub data: DataSection,
    pub episodes: EpisodeSection,
    pub meta: MetaSection,
    pub robust: RobustSection,
    pub contrastive: ContrastiveSection,
    pub eval: EvalSection,
    pub invert: InvertSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: SourceKind,
    /// Dataset file (`source = "file"`).
    pub path: Option<PathBuf>,
    pub train_classes: usize,
    pub test_classes: usize,
    // Synthetic generator settings; `classes` is train + test.
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_level: f64,
    pub base_amplitude: f64,
    pub detail_amplitude: f64,
    pub generator_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSection {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub unlabeled: bool,
    pub unlabeled_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub gamma_in: f64,
    /// `inf` selects adversarial querying.
    pub gamma_out: f64,
    pub gamma_cl: f64,
    pub inner_steps: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub finetune_scope: Scope,
    pub tasks_per_batch: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub first_order: bool,
    pub outer_optimizer: OuterOptimizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustSection {
    pub kind: RobustKind,
    pub lambda: f64,
    pub divergence: Divergence,
    pub attack: AttackKind,
    /// Pixel levels out of 255.
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2.5 ε / steps` for PGD and `1.25 ε` for FGSM.
    pub step_size: Option<f64>,
    pub random_init: bool,
    pub fgsm_direction: FgsmDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveSection {
    pub tau: f64,
    pub normalize: bool,
    pub adversarial_views: bool,
    /// Smallest crop side as a fraction of the image; 1 disables cropping.
    pub crop_min_scale: f64,
    /// Cut-out square side in pixels; 0 disables.
    pub cutout: usize,
    /// Largest rotation angle in degrees; 0 disables.
    pub rotation_max_deg: f64,
    /// Fill for cut-out and rotation; the training-pool mean when absent.
    pub fill: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: usize,
    pub epsilons: Vec<f64>,
    pub attack_steps: usize,
    pub ft_mode: FineTuneMode,
    /// Fine-tuning scope at test time; the training scope when absent.
    pub scope: Option<Scope>,
    pub ft_steps: usize,
    /// Strength of the AT term in adversarial fine-tuning.
    pub adversarial_gamma: Option<f64>,
    pub task_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertSection {
    pub steps: usize,
    pub step_size: f64,
    pub scheme: AscentScheme,
}

/// Settings shared by every preset: the desk-scale synthetic benchmark.
pub fn desk_defaults() -> ExperimentConfig {
    ExperimentConfig {
        preset: "maml".into(),
        seed: 0,
        output_dir: PathBuf::from("runs/default"),
        threads: None,
        model: ModelSection { hidden: vec![64], embed_dim: 32, activation: Activation::Tanh },
        data: DataSection {
            source: SourceKind::Synthetic,
            path: None,
            train_classes: 20,
            test_classes: 8,
            samples_per_class: 60,
            height: 16,
            width: 16,
            channels: 1,
            noise_level: 48.0,
            base_amplitude: 60.0,
            detail_amplitude: 0.0,
            generator_seed: 0,
        },
        episodes: EpisodeSection { way: 5, shot: 1, query: 15, unlabeled: false, unlabeled_shift: 0.0 },
        meta: MetaSection {
            gamma_in: 0.0,
            gamma_out: 0.0,
            gamma_cl: 0.0,
            inner_steps: 5,
            alpha: 0.1,
            beta1: 0.001,
            beta2: 0.005,
            finetune_scope: Scope::Full,
            tasks_per_batch: 4,
            epochs: 3,
            batches_per_epoch: 100,
            first_order: false,
            outer_optimizer: OuterOptimizer::Adam,
        },
        robust: RobustSection {
            kind: RobustKind::At,
            lambda: 0.0,
            divergence: Divergence::Kl,
            attack: AttackKind::Pgd,
            epsilon: 12.0,
            steps: 10,
            step_size: None,
            random_init: true,
            fgsm_direction: FgsmDirection::Sign,
        },
        contrastive: ContrastiveSection {
            tau: rmaml_core::contrastive::DEFAULT_TAU,
            normalize: true,
            adversarial_views: true,
            crop_min_scale: 0.75,
            cutout: 4,
            rotation_max_deg: 20.0,
            fill: None,
        },
        eval: EvalSection {
            tasks: 200,
            epsilons: vec![0.0, 4.0, 8.0, 12.0, 16.0],
            attack_steps: 10,
            ft_mode: FineTuneMode::Standard,
            scope: None,
            ft_steps: 10,
            adversarial_gamma: None,
            task_seed: 7,
        },
        invert: InvertSection { steps: 100, step_size: 8.0, scheme: AscentScheme::AcceptIfImproved },
    }
}

/// Desk defaults with the method knobs of preset `name`.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut c = desk_defaults();
    c.preset = name.into();
    let m = &mut c.meta;
    match name {
        "maml" => {}
        "rmaml_both" => {
            m.gamma_in = 0.2;
            m.gamma_out = 0.2;
        }
        "rmaml_out" => m.gamma_out = 0.2,
        "rmaml_out_fgsm" => {
            m.gamma_out = 0.2;
            c.robust.attack = AttackKind::Fgsm;
            c.robust.steps = 1;
        }
        "rmaml_out_anil" => {
            m.gamma_out = 0.2;
            m.finetune_scope = Scope::HeadOnly;
        }
        "aq" => m.gamma_out = f64::INFINITY,
        "rmaml_out_trades" => {
            m.gamma_out = 5.0;
            c.robust.kind = RobustKind::Trades;
            c.episodes.unlabeled = true;
        }
        "rmaml_out_cl" => {
            m.gamma_out = 5.0;
            m.gamma_cl = rmaml_core::contrastive::DEFAULT_GAMMA_CL;
            c.robust.kind = RobustKind::Trades;
        }
        other => {
            return Err(RunError::Config(format!(
                "preset: unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(c)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves configuration text: preset defaults overlaid with the file.
pub fn parse(text: &str, origin: &Path) -> Result<ExperimentConfig> {
    let file: toml::Table = toml::from_str(text).map_err(|e| RunError::Config(format!("{}: {e}", origin.display())))?;
    let name = match file.get("preset") {
        None => "maml".to_string(),
        Some(toml::Value::String(s)) => s.clone(),
        Some(_) => return Err(RunError::Config("preset: must be a string".into())),
    };
    let base = preset(&name)?;
    let mut table = toml::Table::try_from(&base).map_err(|e| RunError::Config(e.to_string()))?;
    merge(&mut table, file);
    let cfg: ExperimentConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| RunError::Config(format!("{}: {}", origin.display(), e.message())))?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RunError::Config(format!("config file {} not found", path.display())),
        _ => RunError::io(path, e),
    })?;
    parse(&text, path)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| RunError::Config(format!("cannot serialize config: {e}")))
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> RunError {
    RunError::Config(format!("{field}: {msg}"))
}

fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(field_err(field, msg))
    }
}

fn finite_nonneg(v: f64) -> bool {
    v >= 0.0 && v.is_finite()
}

fn finite_pos(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ExperimentConfig {
    /// Field-level validation of everything that can be checked without
    /// reading data.
    pub fn validate(&self) -> Result<()> {
        check(PRESETS.contains(&self.preset.as_str()), "preset", "unknown preset")?;
        check(self.threads != Some(0), "threads", "must be >= 1")?;
        check(!self.model.hidden.contains(&0), "model.hidden", "widths must be positive")?;
        check(self.model.embed_dim > 0, "model.embed_dim", "must be positive")?;
        let d = &self.data;
        match d.source {
            SourceKind::File => match &d.path {
                None => return Err(field_err("data.path", "required when data.source = \"file\"")),
                Some(p) if !p.exists() => {
                    return Err(field_err("data.path", format!("{} does not exist", p.display())))
                }
                Some(_) => {}
            },
            SourceKind::Synthetic => {
                check(d.samples_per_class > 0, "data.samples_per_class", "must be positive")?;
                check(d.height > 0 && d.width > 0 && d.channels > 0, "data.height/width/channels", "must be positive")?;
                check(finite_nonneg(d.noise_level), "data.noise_level", "must be finite and >= 0")?;
                check(finite_nonneg(d.base_amplitude), "data.base_amplitude", "must be finite and >= 0")?;
                check(finite_nonneg(d.detail_amplitude), "data.detail_amplitude", "must be finite and >= 0")?;
            }
        }
        check(d.train_classes >= self.episodes.way, "data.train_classes", "must be >= episodes.way")?;
        check(d.test_classes >= self.episodes.way, "data.test_classes", "must be >= episodes.way")?;
        let e = &self.episodes;
        check(e.way >= 2, "episodes.way", "must be >= 2")?;
        check(e.shot >= 1, "episodes.shot", "must be >= 1")?;
        check(e.query >= 1, "episodes.query", "must be >= 1")?;
        check(finite_nonneg(e.unlabeled_shift), "episodes.unlabeled_shift", "must be finite and >= 0")?;
        let m = &self.meta;
        check(finite_nonneg(m.gamma_in), "meta.gamma_in", "must be finite and >= 0")?;
        check(m.gamma_out >= 0.0, "meta.gamma_out", "must be >= 0 (inf allowed)")?;
        check(finite_nonneg(m.gamma_cl), "meta.gamma_cl", "must be finite and >= 0")?;
        check(finite_pos(m.alpha), "meta.alpha", "must be finite and > 0")?;
        check(finite_pos(m.beta1), "meta.beta1", "must be finite and > 0")?;
        check(finite_pos(m.beta2), "meta.beta2", "must be finite and > 0")?;
        check(m.tasks_per_batch >= 1, "meta.tasks_per_batch", "must be >= 1")?;
        let r = &self.robust;
        check(finite_nonneg(r.lambda), "robust.lambda", "must be finite and >= 0")?;
        check(
            !(r.kind == RobustKind::At && r.lambda != 0.0),
            "robust.lambda",
            "AT regularization uses lambda = 0",
        )?;
        check(finite_nonneg(r.epsilon), "robust.epsilon", "must be finite and >= 0")?;
        check(
            r.attack != AttackKind::Fgsm || r.steps == 1,
            "robust.steps",
            "FGSM takes exactly one step",
        )?;
        if let Some(s) = r.step_size {
            check(finite_pos(s), "robust.step_size", "must be finite and > 0")?;
        }
        check(
            !(e.unlabeled && r.kind == RobustKind::At && m.gamma_out > 0.0),
            "episodes.unlabeled",
            "unlabeled data can only be used with TRADES regularization",
        )?;
        let c = &self.contrastive;
        check(finite_pos(c.tau), "contrastive.tau", "must be finite and > 0")?;
        check(
            c.crop_min_scale > 0.0 && c.crop_min_scale <= 1.0,
            "contrastive.crop_min_scale",
            "must be in (0, 1]",
        )?;
        check(finite_nonneg(c.rotation_max_deg), "contrastive.rotation_max_deg", "must be finite and >= 0")?;
        let ev = &self.eval;
        check(ev.tasks >= 1, "eval.tasks", "must be >= 1")?;
        check(!ev.epsilons.is_empty(), "eval.epsilons", "must not be empty")?;
        check(
            ev.epsilons.iter().all(|v| finite_nonneg(*v)) && ev.epsilons.windows(2).all(|w| w[0] < w[1]),
            "eval.epsilons",
            "must be finite, >= 0 and strictly ascending",
        )?;
        if let Some(g) = ev.adversarial_gamma {
            check(finite_nonneg(g), "eval.adversarial_gamma", "must be finite and >= 0")?;
        }
        check(finite_pos(self.invert.step_size), "invert.step_size", "must be finite and > 0")?;
        self.meta_config(127.5)
            .validate()
            .map_err(|e| RunError::Config(format!("meta: {e}")))?;
        Ok(())
    }

    pub fn attack(&self) -> AttackConfig {
        let r = &self.robust;
        let mut a = match r.attack {
            AttackKind::Pgd => AttackConfig::pgd(r.epsilon, r.steps),
            AttackKind::Fgsm => AttackConfig::fgsm(r.epsilon),
        };
        if let Some(s) = r.step_size {
            a.step_size = s;
        }
        a.random_init = r.random_init;
        a.fgsm_direction = r.fgsm_direction;
        a
    }

    pub fn robust_spec(&self) -> RobustSpec {
        RobustSpec {
            kind: self.robust.kind,
            lambda: self.robust.lambda,
            attack: self.attack(),
            divergence: self.robust.divergence,
        }
    }

    /// Core training config; `fill` is the contrastive fill value used when
    /// the file does not set one.
    pub fn meta_config(&self, fill: f64) -> MetaConfig {
        let m = &self.meta;
        let c = &self.contrastive;
        MetaConfig {
            gamma_in: m.gamma_in,
            gamma_out: m.gamma_out,
            gamma_cl: m.gamma_cl,
            inner_steps: m.inner_steps,
            alpha: m.alpha,
            beta1: m.beta1,
            beta2: m.beta2,
            finetune_scope: m.finetune_scope,
            robust: self.robust_spec(),
            tasks_per_batch: m.tasks_per_batch,
            epochs: m.epochs,
            batches_per_epoch: m.batches_per_epoch,
            seed: self.seed,
            first_order: m.first_order,
            outer_optimizer: m.outer_optimizer,
            contrastive: ContrastiveConfig {
                tau: c.tau,
                normalize: c.normalize,
                adversarial_views: c.adversarial_views,
                transforms: Transforms {
                    crop_min_scale: (c.crop_min_scale < 1.0).then_some(c.crop_min_scale),
                    cutout: (c.cutout > 0).then_some(c.cutout),
                    rotation_max_deg: (c.rotation_max_deg > 0.0).then_some(c.rotation_max_deg),
                    fill: c.fill.unwrap_or(fill),
                },
            },
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        let e = &self.episodes;
        EpisodeConfig {
            way: e.way,
            shot: e.shot,
            query: e.query,
            unlabeled: e.unlabeled,
            unlabeled_shift: e.unlabeled_shift,
        }
    }

    pub fn test_config(&self) -> TestConfig {
        let meta = self.meta_config(127.5);
        let mut t = TestConfig::from_training(&meta, self.eval.ft_mode);
        t.steps = self.eval.ft_steps;
        if let Some(s) = self.eval.scope {
            t.scope = s;
        }
        if let Some(g) = self.eval.adversarial_gamma {
            t.adversarial_gamma = g;
        }
        t.seed = self.eval.task_seed;
        t
    }

    pub fn arch(&self, dims: (usize, usize, usize)) -> ArchSpec {
        ArchSpec {
            input_dims: dims,
            hidden: self.model.hidden.clone(),
            embed_dim: self.model.embed_dim,
            n_classes: self.episodes.way,
            activation: self.model.activation,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            classes: d.train_classes + d.test_classes,
            samples_per_class: d.samples_per_class,
            dims: (d.height, d.width, d.channels),
            noise_level: d.noise_level,
            seed: d.generator_seed,
            base_amplitude: d.base_amplitude,
            detail_amplitude: d.detail_amplitude,
        }
    }

    /// The full dataset named by the `data` section.
    pub fn dataset(&self) -> Result<Dataset> {
        match self.data.source {
            SourceKind::Synthetic => Ok(synth_dataset(&self.synth_config())?),
            SourceKind::File => {
                let path = self
                    .data
                    .path
                    .as_ref()
                    .ok_or_else(|| field_err("data.path", "required when data.source = \"file\""))?;
                dataset_file::load(path)
            }
        }
    }

    /// Disjoint (meta-train, meta-test) class pools.
    pub fn pools(&self) -> Result<(Dataset, Dataset)> {
        let all = self.dataset()?;
        let (tr, te) = (self.data.train_classes, self.data.test_classes);
        if tr + te > all.classes() {
            return Err(field_err(
                "data.train_classes",
                format!("train_classes + test_classes = {} exceeds the {} classes available", tr + te, all.classes()),
            ));
        }
        Ok(all.split(tr, te)?)
    }
}
