//! Subcommand implementations. Each takes a resolved configuration; flag
//! handling lives in the binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rmaml_core::evaluation::{ra_sweep, invert_neuron, EvalReport, IamResult};
use rmaml_core::metalearn::{train_epoch, LogRecord, OuterState};
use rmaml_core::tasks::{test_tasks, Dataset, EpisodeStream};
use rmaml_core::model::MetaModel;
use rmaml_core::Tensor;

use crate::config::{self, ExperimentConfig};
use crate::error::{Result, RunError};
use crate::exec::Pool;
use crate::{checkpoint, dataset_file, iam_dump, report};

pub const CHECKPOINT_FILE: &str = "checkpoint.rmck";
pub const LOG_FILE: &str = "train_log.ndjson";
pub const ECHO_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.csv";

pub struct Trained {
    pub model: MetaModel,
    pub log: Vec<LogRecord>,
    /// Wall-clock seconds per epoch.
    pub epoch_seconds: Vec<f64>,
}

/// Trains in memory on the meta-train pool of `cfg`.
pub fn fit(cfg: &ExperimentConfig, pool: &Pool) -> Result<Trained> {
    cfg.validate()?;
    let (train_pool, _) = cfg.pools()?;
    fit_on(cfg, &train_pool, pool)
}

pub fn fit_on(cfg: &ExperimentConfig, data: &Dataset, pool: &Pool) -> Result<Trained> {
    let meta = cfg.meta_config(data.mean_pixel());
    meta.validate()?;
    let episode = cfg.episode_config();
    episode.validate_for(data)?;
    let source = EpisodeStream {
        data,
        episode,
        tasks_per_batch: meta.tasks_per_batch,
        batches_per_epoch: meta.batches_per_epoch,
        seed: cfg.seed,
    };
    let mut model = MetaModel::init(cfg.arch(data.dims()), cfg.seed)?;
    let mut state = OuterState::default();
    let mut log = Vec::new();
    let mut epoch_seconds = Vec::new();
    for epoch in 0..meta.epochs {
        let start = Instant::now();
        let (next, l) = train_epoch(model, &source, &meta, &mut state, epoch, pool)?;
        epoch_seconds.push(start.elapsed().as_secs_f64());
        model = next;
        log.extend(l);
    }
    Ok(Trained { model, log, epoch_seconds })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))
}

fn write_log(log: &[LogRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in log {
        serde_json::to_writer(&mut out, r).map_err(|e| RunError::format(path, e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| RunError::io(path, e))
}

/// `train`: writes the checkpoint, the training log and the config echo to
/// `cfg.output_dir`.
pub fn train(cfg: &ExperimentConfig) -> Result<Trained> {
    cfg.validate()?;
    let pool = Pool::new(cfg.threads)?;
    let trained = fit(cfg, &pool)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    checkpoint::save(&trained.model, &dir.join(CHECKPOINT_FILE))?;
    write_log(&trained.log, &dir.join(LOG_FILE))?;
    let echo = dir.join(ECHO_FILE);
    fs::write(&echo, config::to_toml(cfg)?).map_err(|e| RunError::io(&echo, e))?;
    Ok(trained)
}

fn check_arch(model: &MetaModel, cfg: &ExperimentConfig, dims: (usize, usize, usize)) -> Result<()> {
    let want = cfg.arch(dims);
    let have = model.net.spec();
    if *have != want {
        return Err(RunError::Config(format!(
            "checkpoint architecture does not match the configuration: checkpoint has {have:?}, config describes {want:?}"
        )));
    }
    Ok(())
}

/// SA/RA sweep of `model` over the meta-test pool, without writing files.
pub fn evaluate(model: &MetaModel, cfg: &ExperimentConfig, pool: &Pool) -> Result<EvalReport> {
    cfg.validate()?;
    let (_, test_pool) = cfg.pools()?;
    check_arch(model, cfg, test_pool.dims())?;
    let tasks = test_tasks(&test_pool, &cfg.episode_config(), cfg.eval.tasks, cfg.eval.task_seed)?;
    let start = Instant::now();
    let mut rep = ra_sweep(model, &tasks, &cfg.eval.epsilons, cfg.eval.attack_steps, &cfg.test_config(), pool)?;
    rep.wall_time = Some(start.elapsed().as_secs_f64());
    rep.config_echo = config::to_toml(cfg)?;
    Ok(rep)
}

/// `eval`: writes `report.csv` and its sidecar to `cfg.output_dir`.
pub fn eval(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<(EvalReport, PathBuf)> {
    cfg.validate()?;
    let model = checkpoint::load(checkpoint_path)?;
    let pool = Pool::new(cfg.threads)?;
    let rep = evaluate(&model, cfg, &pool)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(REPORT_FILE);
    report::emit(&rep, &path)?;
    Ok((rep, path))
}

/// `invert`: maximizes encoder output `neuron` starting from image `index`
/// of the dataset file `image`, and dumps the result to `cfg.output_dir`.
pub fn invert(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    image: &Path,
    index: usize,
    neuron: usize,
) -> Result<IamResult> {
    cfg.validate()?;
    let model = checkpoint::load(checkpoint_path)?;
    let data = dataset_file::load(image)?;
    let dims = data.dims();
    if dims != model.net.spec().input_dims {
        return Err(RunError::Config(format!(
            "image dims {dims:?} do not match the checkpoint input {:?}",
            model.net.spec().input_dims
        )));
    }
    let total = data.classes() * data.samples_per_class();
    if index >= total {
        return Err(RunError::Config(format!("index: {index} out of range for {total} images in {}", image.display())));
    }
    let spc = data.samples_per_class();
    let pixels = data.image(index / spc, index % spc).iter().map(|&p| p as f64).collect();
    let seed = Tensor::new(vec![1, data.image_len()], pixels)?;
    let inv = &cfg.invert;
    let result = invert_neuron(&model, &seed, neuron, inv.steps, inv.step_size, inv.scheme)?;
    iam_dump::dump(&result, dims, &cfg.output_dir)?;
    Ok(result)
}

/// `convert-dataset`: per-class raw files to a dataset file.
pub fn convert_dataset(
    dir: &Path,
    dims: (usize, usize, usize),
    samples_per_class: Option<usize>,
    out: &Path,
) -> Result<Dataset> {
    let data = dataset_file::convert_raw_dir(dir, dims, samples_per_class)?;
    dataset_file::save(&data, out)?;
    Ok(data)
}

/// `synth-dataset`: writes the synthetic dataset described by `cfg.data`.
pub fn synth_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let data = rmaml_core::tasks::synth_dataset(&cfg.synth_config())?;
    dataset_file::save(&data, out)?;
    Ok(data)
}

/// One progress line per epoch on stderr.
pub fn print_epochs(t: &Trained, batches: usize) {
    let mut err = std::io::stderr().lock();
    for (e, secs) in t.epoch_seconds.iter().enumerate() {
        let recs = &t.log[e * batches..(e + 1) * batches];
        let mean = recs.iter().map(|r| r.total).sum::<f64>() / recs.len().max(1) as f64;
        let _ = writeln!(err, "epoch {e}: mean objective {mean:.4} ({secs:.1}s)");
    }
}
