//! Contrastive auxiliary loss over encoder representations, plus the
//! augmentations that produce positive views.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{attack, perturbed, AttackConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{cross_entropy, Network, PIXEL_MAX};
use crate::tasks::Dims;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_GAMMA_CL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub normalize: bool,
    pub transforms: Transforms,
    /// Add adversarial examples of the query batch as extra views.
    pub adversarial_views: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: DEFAULT_TAU,
            normalize: true,
            transforms: Transforms::default(),
            adversarial_views: true,
        }
    }
}

/// Euclidean norm of every row, broadcast back to the shape of `reps`.
fn row_norms(g: &mut Graph, reps: Var) -> Result<Var> {
    let d = g.shape(reps)[1];
    let sq = g.mul(reps, reps)?;
    let ones_col = g.constant(Tensor::filled(&[d, 1], 1.0));
    let ss = g.matmul(sq, ones_col)?;
    let logs = g.log(ss)?;
    let half = g.scale(logs, 0.5)?;
    let norms = g.exp(half)?;
    let ones_row = g.constant(Tensor::filled(&[1, d], 1.0));
    g.matmul(norms, ones_row)
}

/// InfoNCE-style loss. Rows of `reps` that share a `groups` id are positives
/// of each other; every row from another group is a negative. For each
/// ordered positive pair `(a, p)` the term is
/// `-log(exp(s_ap) / (exp(s_ap) + Σ_n exp(s_an)))` with `s = r·r'/τ`,
/// and the loss is the mean over all such pairs.
pub fn contrastive_loss(g: &mut Graph, reps: Var, groups: &[usize], tau: f64, normalize: bool) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let shape = g.shape(reps).to_vec();
    if shape.len() != 2 || shape[0] != groups.len() {
        return Err(Error::Shape {
            node: reps.index(),
            op: "contrastive_loss",
            detail: format!("representations {shape:?} vs {} group ids", groups.len()),
        });
    }
    let m = shape[0];
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (0..m).filter(move |&p| p != a).map(move |p| (a, p)))
        .filter(|&(a, p)| groups[a] == groups[p])
        .collect();
    if pairs.is_empty() {
        return Err(Error::InsufficientData("contrastive loss needs at least one positive pair".into()));
    }
    if pairs.iter().any(|&(a, _)| groups.iter().all(|&gid| gid == groups[a])) {
        return Err(Error::InsufficientData("contrastive loss needs negatives for every anchor".into()));
    }

    let r = if normalize {
        let norms = row_norms(g, reps)?;
        g.div(reps, norms)?
    } else {
        reps
    };
    let rt = g.transpose(r)?;
    let dots = g.matmul(r, rt)?;
    let sims = g.scale(dots, 1.0 / tau)?;

    // Row-wise shift for a stable exp; it cancels exactly in the loss.
    let sv = g.value(sims).clone();
    let mut selector = vec![0.0; pairs.len() * m];
    let mut include = vec![0.0; pairs.len() * m];
    let mut positive = vec![0.0; pairs.len() * m];
    let mut shift = vec![0.0; pairs.len() * m];
    for (k, &(a, p)) in pairs.iter().enumerate() {
        selector[k * m + a] = 1.0;
        positive[k * m + p] = 1.0;
        let row = sv.row(a);
        let mut hi = row[p];
        for j in 0..m {
            if j == p || groups[j] != groups[a] {
                include[k * m + j] = 1.0;
                hi = hi.max(row[j]);
            }
        }
        for j in 0..m {
            shift[k * m + j] = hi;
        }
    }
    let n = pairs.len();
    let sel = g.constant(Tensor::new(vec![n, m], selector)?);
    let pair_rows = g.matmul(sel, sims)?;
    let shift = g.constant(Tensor::new(vec![n, m], shift)?);
    let centered = g.sub(pair_rows, shift)?;
    let e = g.exp(centered)?;
    let mask = g.constant(Tensor::new(vec![n, m], include)?);
    let kept = g.mul(e, mask)?;
    let ones = g.constant(Tensor::filled(&[m, 1], 1.0));
    let denom = g.matmul(kept, ones)?;
    let log_denom = g.log(denom)?;
    let pos_mask = g.constant(Tensor::new(vec![n, m], positive)?);
    let pos = g.mul(centered, pos_mask)?;
    let pos_total = g.sum(pos)?;
    let denom_total = g.sum(log_denom)?;
    let total = g.sub(denom_total, pos_total)?;
    g.scale(total, 1.0 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Transform,
    Adversarial,
}

/// Anchor rows paired by index with positive views.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub provenance: Vec<ViewKind>,
}

impl ViewBatch {
    /// `[anchors; positives]` stacked, with group id `i` for both rows of pair `i`.
    pub fn stacked(&self) -> Result<(Tensor, Vec<usize>)> {
        let b = self.anchors.shape()[0];
        let rows = Tensor::concat_rows(&[&self.anchors, &self.positives])?;
        Ok((rows, (0..2 * b).map(|i| i % b).collect()))
    }
}

/// Enabled augmentations, applied in the order crop, cutout, rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transforms {
    /// Smallest crop side as a fraction of the image side.
    pub crop_min_scale: Option<f64>,
    /// Side of the square cut-out patch, in pixels.
    pub cutout: Option<usize>,
    /// Rotation angle drawn from `[-max, max]` degrees.
    pub rotation_max_deg: Option<f64>,
    /// Fill value for cut-out and pixels rotated in from outside.
    pub fill: f64,
}

impl Default for Transforms {
    fn default() -> Self {
        Transforms {
            crop_min_scale: Some(0.75),
            cutout: Some(4),
            rotation_max_deg: Some(20.0),
            fill: 127.5,
        }
    }
}

impl Transforms {
    pub fn identity() -> Self {
        Transforms { crop_min_scale: None, cutout: None, rotation_max_deg: None, fill: 0.0 }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if let Some(s) = self.crop_min_scale {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::Config(format!("crop_min_scale must be in (0, 1], got {s}")));
            }
        }
        if let Some(c) = self.cutout {
            if c == 0 || c > dims.0 || c > dims.1 {
                return Err(Error::Config(format!("cutout {c} does not fit {dims:?}")));
            }
        }
        if let Some(r) = self.rotation_max_deg {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("rotation_max_deg must be >= 0, got {r}")));
            }
        }
        if !(0.0..=PIXEL_MAX).contains(&self.fill) {
            return Err(Error::Config(format!("fill {} outside pixel range", self.fill)));
        }
        Ok(())
    }
}

fn idx(dims: Dims, y: usize, x: usize, c: usize) -> usize {
    (y * dims.1 + x) * dims.2 + c
}

/// Crops the `side_h × side_w` window at `(top, left)` and resizes it back
/// with nearest-neighbour sampling.
pub fn crop_resize(img: &[f64], dims: Dims, top: usize, left: usize, side_h: usize, side_w: usize) -> Vec<f64> {
    let (h, w, ch) = dims;
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        let sy = top + (y * side_h) / h;
        for x in 0..w {
            let sx = left + (x * side_w) / w;
            for c in 0..ch {
                out[idx(dims, y, x, c)] = img[idx(dims, sy, sx, c)];
            }
        }
    }
    out
}

/// Fills the `size × size` square at `(top, left)` with `fill`.
pub fn cutout(img: &mut [f64], dims: Dims, top: usize, left: usize, size: usize, fill: f64) {
    for y in top..top + size {
        for x in left..left + size {
            for c in 0..dims.2 {
                img[idx(dims, y, x, c)] = fill;
            }
        }
    }
}

/// Rotation about the image centre by `degrees`, nearest-neighbour; pixels
/// mapped from outside the image take `fill`.
pub fn rotate(img: &[f64], dims: Dims, degrees: f64, fill: f64) -> Vec<f64> {
    let (h, w, ch) = dims;
    let t = degrees.to_radians();
    let (ct, st) = (libm::cos(t), libm::sin(t));
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![fill; img.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = libm::round(ct * dx + st * dy + cx);
            let sy = libm::round(-st * dx + ct * dy + cy);
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                for c in 0..ch {
                    out[idx(dims, y, x, c)] = img[idx(dims, sy as usize, sx as usize, c)];
                }
            }
        }
    }
    out
}

/// One random view of a single image.
pub fn transform_image<R: Rng + ?Sized>(img: &[f64], dims: Dims, t: &Transforms, rng: &mut R) -> Vec<f64> {
    let (h, w, _) = dims;
    let mut out = img.to_vec();
    if let Some(min_scale) = t.crop_min_scale {
        let s = if min_scale < 1.0 { rng.random_range(min_scale..=1.0) } else { 1.0 };
        let sh = ((h as f64 * s) as usize).clamp(1, h);
        let sw = ((w as f64 * s) as usize).clamp(1, w);
        let top = rng.random_range(0..=h - sh);
        let left = rng.random_range(0..=w - sw);
        out = crop_resize(&out, dims, top, left, sh, sw);
    }
    if let Some(size) = t.cutout {
        let top = rng.random_range(0..=h - size);
        let left = rng.random_range(0..=w - size);
        cutout(&mut out, dims, top, left, size, t.fill);
    }
    if let Some(max) = t.rotation_max_deg {
        let deg = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        out = rotate(&out, dims, deg, t.fill);
    }
    out
}

/// Pairs every row of `batch` with a random transformed view of itself.
pub fn make_views<R: Rng + ?Sized>(batch: &Tensor, dims: Dims, t: &Transforms, rng: &mut R) -> Result<ViewBatch> {
    t.validate(dims)?;
    let (rows, cols) = batch
        .rows_cols()
        .ok_or_else(|| Error::Config("view batch must be a matrix".into()))?;
    if rows == 0 {
        return Err(Error::Empty("view batch"));
    }
    if cols != dims.0 * dims.1 * dims.2 {
        return Err(Error::Config(format!("rows of {cols} pixels do not match {dims:?}")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        data.extend(transform_image(batch.row(r), dims, t, rng));
    }
    Ok(ViewBatch {
        anchors: batch.clone(),
        positives: Tensor::new(vec![rows, cols], data)?,
        provenance: vec![ViewKind::Transform; rows],
    })
}

/// `x + δ*` with δ* attacking the cross-entropy of the network at `params`.
pub fn adversarial_views<R: Rng + ?Sized>(
    net: &Network,
    params: &Tensor,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let objective = |g: &mut Graph, xa: Var| {
        let w = g.constant(params.clone());
        let logits = net.logits(g, w, xa)?;
        cross_entropy(g, logits, labels)
    };
    let delta = attack(&objective, x, cfg, rng)?;
    Ok(perturbed(x, &delta))
}
