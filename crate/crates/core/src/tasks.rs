//! Episodic few-shot data: an in-memory `u8` image dataset, a procedural
//! texture family for desk-scale experiments, and N-way K-shot sampling.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PIXEL_MAX;
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// Image extents as `(height, width, channels)`; pixels are stored row-major
/// with channels last.
pub type Dims = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    classes: usize,
    samples_per_class: usize,
    dims: Dims,
    pixels: Vec<u8>,
}

impl Dataset {
    pub fn new(classes: usize, samples_per_class: usize, dims: Dims, pixels: Vec<u8>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InsufficientData("dataset has 0 classes".into()));
        }
        if samples_per_class == 0 {
            return Err(Error::InsufficientData("dataset has 0 samples per class".into()));
        }
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::Config(format!("image dims must be positive, got {dims:?}")));
        }
        let expected = classes * samples_per_class * dims.0 * dims.1 * dims.2;
        if pixels.len() != expected {
            return Err(Error::TensorSize {
                shape: alloc::vec![classes, samples_per_class, dims.0 * dims.1 * dims.2],
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Dataset { classes, samples_per_class, dims, pixels })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples_per_class(&self) -> usize {
        self.samples_per_class
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn image_len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, class: usize, sample: usize) -> &[u8] {
        let n = self.image_len();
        let start = (class * self.samples_per_class + sample) * n;
        &self.pixels[start..start + n]
    }

    /// Mean pixel value over the whole dataset.
    pub fn mean_pixel(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Classes `[start, end)` as a new dataset.
    pub fn class_range(&self, start: usize, end: usize) -> Result<Dataset> {
        if start >= end || end > self.classes {
            return Err(Error::InsufficientData(format!(
                "class range {start}..{end} invalid for {} classes",
                self.classes
            )));
        }
        let per = self.samples_per_class * self.image_len();
        Dataset::new(
            end - start,
            self.samples_per_class,
            self.dims,
            self.pixels[start * per..end * per].to_vec(),
        )
    }

    /// Disjoint (meta-train, meta-test) class pools: the first `train` classes
    /// and the `test` classes following them.
    pub fn split(&self, train: usize, test: usize) -> Result<(Dataset, Dataset)> {
        Ok((self.class_range(0, train)?, self.class_range(train, train + test)?))
    }

    /// Rows `[n, D]` scaled as raw pixel levels.
    pub fn batch(&self, ids: &[(usize, usize)]) -> Result<Tensor> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &(c, s) in ids {
            if c >= self.classes || s >= self.samples_per_class {
                return Err(Error::InsufficientData(format!("sample ({c}, {s}) out of range")));
            }
            data.extend(self.image(c, s).iter().map(|&p| p as f64));
        }
        Tensor::new(alloc::vec![ids.len(), n], data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub dims: Dims,
    /// Standard deviation of the per-pixel Gaussian noise, in pixel levels.
    pub noise_level: f64,
    pub seed: u64,
    /// Amplitude (pixel levels) of the coarse class texture.
    #[serde(default = "default_base_amplitude")]
    pub base_amplitude: f64,
    /// Amplitude of an extra high-frequency class grating; 0 disables it.
    #[serde(default)]
    pub detail_amplitude: f64,
}

fn default_base_amplitude() -> f64 {
    60.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 28,
            samples_per_class: 60,
            dims: (16, 16, 1),
            noise_level: 24.0,
            seed: 0,
            base_amplitude: 60.0,
            detail_amplitude: 0.0,
        }
    }
}

const MAX_PATTERN_CORRELATION: f64 = 0.5;

fn grating<R: Rng + ?Sized>(dims: Dims, freqs: core::ops::Range<f64>, rng: &mut R) -> Vec<f64> {
    let (h, w, c) = dims;
    let freq = rng.random_range(freqs);
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (ct, st) = (libm::cos(theta), libm::sin(theta));
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 / w as f64) * ct + (y as f64 / h as f64) * st;
            let v = libm::cos(2.0 * PI * freq * u + phase);
            for ch in 0..c {
                out.push(v * (1.0 - 0.2 * ch as f64));
            }
        }
    }
    out
}

/// Pearson correlation of two equally sized patterns.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma) * (x - ma);
        bb += (y - mb) * (y - mb);
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / libm::sqrt(aa * bb)
}

/// Coarse texture per class: the sum of two random low-frequency gratings,
/// in `[-1.6, 1.6]`. Candidates whose absolute correlation with an earlier
/// class reaches 0.5 are redrawn.
pub fn class_patterns(classes: usize, dims: Dims, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng_for(seed, &[0x5157]);
    let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0usize;
    while patterns.len() < classes {
        attempts += 1;
        if attempts > 10_000 * classes.max(1) {
            return Err(Error::InsufficientData(format!(
                "could not draw {classes} decorrelated patterns at {dims:?}"
            )));
        }
        let a = grating(dims, 1.0..4.0, &mut rng);
        let b = grating(dims, 1.0..4.0, &mut rng);
        let raw: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + 0.6 * y).collect();
        if patterns
            .iter()
            .any(|p| libm::fabs(correlation(p, &raw)) >= MAX_PATTERN_CORRELATION)
        {
            continue;
        }
        patterns.push(raw);
    }
    Ok(patterns)
}

/// Fine class texture: one grating between 5 and 8 cycles per image.
fn detail_patterns(classes: usize, dims: Dims, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, &[0x5159]);
    (0..classes).map(|_| grating(dims, 5.0..8.0, &mut rng)).collect()
}

fn to_pixel(v: f64) -> u8 {
    libm::round(v.clamp(0.0, PIXEL_MAX)) as u8
}

/// Procedural texture dataset: every sample is its class pattern (coarse
/// texture plus optional fine grating) plus i.i.d. Gaussian pixel noise,
/// rounded and clipped to `u8`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.samples_per_class == 0 {
        return Err(Error::InsufficientData("synthetic dataset needs positive counts".into()));
    }
    if !(cfg.noise_level >= 0.0 && cfg.noise_level.is_finite()) {
        return Err(Error::Config(format!("noise_level must be >= 0, got {}", cfg.noise_level)));
    }
    let coarse = class_patterns(cfg.classes, cfg.dims, cfg.seed)?;
    let detail = detail_patterns(cfg.classes, cfg.dims, cfg.seed);
    let patterns: Vec<Vec<f64>> = coarse
        .iter()
        .zip(&detail)
        .map(|(c, d)| {
            c.iter()
                .zip(d)
                .map(|(a, b)| 127.5 + cfg.base_amplitude * a + cfg.detail_amplitude * b)
                .collect()
        })
        .collect();
    let n = cfg.dims.0 * cfg.dims.1 * cfg.dims.2;
    let mut pixels = Vec::with_capacity(cfg.classes * cfg.samples_per_class * n);
    let noise = Normal::new(0.0, cfg.noise_level.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    for (c, pattern) in patterns.iter().enumerate() {
        let mut rng = rng_for(cfg.seed, &[0x5158, c as u64]);
        for _ in 0..cfg.samples_per_class {
            for &base in pattern {
                let eps = if cfg.noise_level > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                pixels.push(to_pixel(base + eps));
            }
        }
    }
    Dataset::new(cfg.classes, cfg.samples_per_class, cfg.dims, pixels)
}

/// Rows of pixel data with episode-local labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub support: LabeledBatch,
    pub query: LabeledBatch,
    /// Extra query-sized rows with no labels attached.
    pub unlabeled: Option<Tensor>,
    /// `class_map[local] = global class id`.
    pub class_map: Vec<usize>,
    pub support_ids: Vec<(usize, usize)>,
    pub query_ids: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub unlabeled: bool,
    /// Std of extra Gaussian noise on unlabeled rows (pixel levels); 0 keeps
    /// them in-distribution.
    #[serde(default)]
    pub unlabeled_shift: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { way: 5, shot: 1, query: 15, unlabeled: false, unlabeled_shift: 0.0 }
    }
}

impl EpisodeConfig {
    pub fn validate_for(&self, data: &Dataset) -> Result<()> {
        if self.way < 2 || self.shot == 0 || self.query == 0 {
            return Err(Error::Config(format!(
                "episodes need way >= 2, shot >= 1, query >= 1; got {}/{}/{}",
                self.way, self.shot, self.query
            )));
        }
        if !(self.unlabeled_shift >= 0.0 && self.unlabeled_shift.is_finite()) {
            return Err(Error::Config("unlabeled_shift must be finite and >= 0".into()));
        }
        if data.classes() < self.way {
            return Err(Error::InsufficientData(format!(
                "{}-way episodes need {} classes, pool has {}",
                self.way,
                self.way,
                data.classes()
            )));
        }
        if data.samples_per_class() < self.shot + self.query {
            return Err(Error::InsufficientData(format!(
                "need {} samples per class, pool has {}",
                self.shot + self.query,
                data.samples_per_class()
            )));
        }
        if self.unlabeled {
            let total = data.classes() * data.samples_per_class();
            let used = self.way * (self.shot + self.query);
            if total - used < self.way * self.query {
                return Err(Error::InsufficientData(format!(
                    "unlabeled pool of {} needs more held-out samples than {}",
                    self.way * self.query,
                    total - used
                )));
            }
        }
        Ok(())
    }
}

/// Draws an episode: classes and samples uniformly without replacement.
pub fn sample_episode<R: Rng + ?Sized>(data: &Dataset, cfg: &EpisodeConfig, rng: &mut R) -> Result<Episode> {
    cfg.validate_for(data)?;
    let class_map: Vec<usize> = sample(rng, data.classes(), cfg.way).into_vec();
    let mut support_ids = Vec::with_capacity(cfg.way * cfg.shot);
    let mut query_ids = Vec::with_capacity(cfg.way * cfg.query);
    let (mut sy, mut qy) = (Vec::new(), Vec::new());
    for (local, &class) in class_map.iter().enumerate() {
        let picks = sample(rng, data.samples_per_class(), cfg.shot + cfg.query).into_vec();
        for (j, s) in picks.into_iter().enumerate() {
            if j < cfg.shot {
                support_ids.push((class, s));
                sy.push(local);
            } else {
                query_ids.push((class, s));
                qy.push(local);
            }
        }
    }
    let unlabeled = if cfg.unlabeled {
        let used: BTreeSet<(usize, usize)> = support_ids.iter().chain(&query_ids).copied().collect();
        let spc = data.samples_per_class();
        let mut ids = Vec::with_capacity(query_ids.len());
        let mut seen = BTreeSet::new();
        while ids.len() < query_ids.len() {
            let k = rng.random_range(0..data.classes() * spc);
            let id = (k / spc, k % spc);
            if !used.contains(&id) && seen.insert(id) {
                ids.push(id);
            }
        }
        let mut x = data.batch(&ids)?;
        if cfg.unlabeled_shift > 0.0 {
            let noise = Normal::new(0.0, cfg.unlabeled_shift).map_err(|e| Error::Config(format!("{e}")))?;
            for v in x.data_mut() {
                *v = libm::round((*v + noise.sample(rng)).clamp(0.0, PIXEL_MAX));
            }
        }
        Some(x)
    } else {
        None
    };
    Ok(Episode {
        way: cfg.way,
        shot: cfg.shot,
        support: LabeledBatch { x: data.batch(&support_ids)?, y: sy },
        query: LabeledBatch { x: data.batch(&query_ids)?, y: qy },
        unlabeled,
        class_map,
        support_ids,
        query_ids,
    })
}

/// Seeded stream of task batches: batch `b` of epoch `e` is a pure function
/// of `(seed, e, b)`.
#[derive(Debug, Clone)]
pub struct EpisodeStream<'a> {
    pub data: &'a Dataset,
    pub episode: EpisodeConfig,
    pub tasks_per_batch: usize,
    pub batches_per_epoch: usize,
    pub seed: u64,
}

impl EpisodeStream<'_> {
    pub fn batch(&self, epoch: usize, index: usize) -> Result<Vec<Episode>> {
        (0..self.tasks_per_batch)
            .map(|t| {
                let mut rng = rng_for(self.seed, &[stream::EPISODE, epoch as u64, index as u64, t as u64]);
                sample_episode(self.data, &self.episode, &mut rng)
            })
            .collect()
    }
}

/// A fixed population of test tasks, task `i` drawn from `(seed, i)`.
pub fn test_tasks(data: &Dataset, cfg: &EpisodeConfig, n: usize, seed: u64) -> Result<Vec<Episode>> {
    (0..n)
        .map(|i| sample_episode(data, cfg, &mut rng_for(seed, &[stream::EPISODE, u64::MAX, i as u64])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        synth_dataset(&SynthConfig {
            classes: 8,
            samples_per_class: 20,
            dims: (8, 8, 1),
            noise_level: 10.0,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_noise_makes_classes_constant() {
        let d = synth_dataset(&SynthConfig { noise_level: 0.0, classes: 4, ..Default::default() }).unwrap();
        for c in 0..4 {
            for s in 1..d.samples_per_class() {
                assert_eq!(d.image(c, s), d.image(c, 0));
            }
        }
    }

    #[test]
    fn patterns_are_decorrelated() {
        let p = class_patterns(28, (16, 16, 1), 0).unwrap();
        for i in 0..p.len() {
            for j in 0..i {
                assert!(correlation(&p[i], &p[j]).abs() < 0.5);
            }
        }
    }

    #[test]
    fn episodes_have_local_labels_and_disjoint_sets() {
        let d = small();
        let cfg = EpisodeConfig { way: 3, shot: 2, query: 4, unlabeled: true, ..Default::default() };
        let e = sample_episode(&d, &cfg, &mut rng_for(1, &[])).unwrap();
        assert_eq!(e.support.len(), 6);
        assert_eq!(e.query.len(), 12);
        assert_eq!(e.unlabeled.as_ref().unwrap().shape(), &[12, 64]);
        assert!(e.support.y.iter().chain(&e.query.y).all(|&y| y < 3));
        assert!(e.support_ids.iter().all(|id| !e.query_ids.contains(id)));
    }

    #[test]
    fn insufficient_samples_is_an_error() {
        let d = small();
        let cfg = EpisodeConfig { way: 5, shot: 10, query: 15, ..Default::default() };
        assert!(matches!(
            sample_episode(&d, &cfg, &mut rng_for(0, &[])),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn split_pools_are_disjoint_class_ranges() {
        let d = small();
        let (a, b) = d.split(5, 3).unwrap();
        assert_eq!(a.image(4, 0), d.image(4, 0));
        assert_eq!(b.image(0, 0), d.image(5, 0));
        assert!(d.split(6, 3).is_err());
    }
}
