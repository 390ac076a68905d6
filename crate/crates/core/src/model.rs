//! Dense classifiers split into a representation block and a linear head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Largest pixel value; inputs are scaled by `1 / PIXEL_MAX` inside the model.
pub const PIXEL_MAX: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Network shape: `input -> hidden... -> embed_dim` (representation) `-> n_classes` (head).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// (height, width, channels)
    pub input_dims: (usize, usize, usize),
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub activation: Activation,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_dims;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config(format!("input_dims must be positive, got {:?}", self.input_dims)));
        }
        if self.hidden.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        let (h, w, c) = self.input_dims;
        h * w * c
    }

    /// (fan_in, fan_out) of every representation layer.
    fn representation_layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_len()];
        dims.extend(&self.hidden);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Representation,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub block: Block,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Architecture plus the layout of the flat parameter vector. Graph-building
/// functions take the parameters as a separate node so the same network can
/// be evaluated at the meta-parameters or at any adapted parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Network {
    spec: ArchSpec,
    layout: Vec<ParamEntry>,
}

impl Network {
    pub fn new(spec: ArchSpec) -> Result<Self> {
        spec.validate()?;
        let mut layout = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, block: Block| {
            let len: usize = shape.iter().product();
            layout.push(ParamEntry { name, shape, block, offset });
            offset += len;
        };
        for (i, (fan_in, fan_out)) in spec.representation_layers().into_iter().enumerate() {
            push(format!("layer{i}.weight"), vec![fan_in, fan_out], Block::Representation);
            push(format!("layer{i}.bias"), vec![1, fan_out], Block::Representation);
        }
        push("head.weight".into(), vec![spec.embed_dim, spec.n_classes], Block::Head);
        push("head.bias".into(), vec![1, spec.n_classes], Block::Head);
        Ok(Network { spec, layout })
    }

    /// Rebuilds a network from a stored layout, checking it against the spec.
    pub fn with_layout(spec: ArchSpec, layout: Vec<ParamEntry>) -> Result<Self> {
        let net = Network::new(spec)?;
        if net.layout != layout {
            return Err(Error::Config("parameter layout does not match the architecture".into()));
        }
        Ok(net)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.last().map_or(0, |e| e.offset + e.len())
    }

    /// Start offset of the head block; the head occupies the tail of the vector.
    pub fn head_offset(&self) -> usize {
        self.layout
            .iter()
            .find(|e| e.block == Block::Head)
            .map_or(self.n_params(), |e| e.offset)
    }

    /// 1 for head parameters, 0 for representation parameters.
    pub fn head_mask(&self) -> Tensor {
        let split = self.head_offset();
        let data = (0..self.n_params())
            .map(|i| if i >= split { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.n_params()], data).expect("mask length")
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<usize> {
        match g.shape(x) {
            [b, d] if *d == self.spec.input_len() => Ok(*b),
            s => Err(Error::Shape {
                node: x.index(),
                op: "model input",
                detail: format!("expected [batch, {}], got {s:?}", self.spec.input_len()),
            }),
        }
    }

    fn dense(&self, g: &mut Graph, w: Var, h: Var, layer: usize, batch: usize) -> Result<Var> {
        let weight = &self.layout[2 * layer];
        let bias = &self.layout[2 * layer + 1];
        let wv = g.slice(w, weight.offset, &weight.shape)?;
        let bv = g.slice(w, bias.offset, &bias.shape)?;
        let z = g.matmul(h, wv)?;
        let ones = g.constant(Tensor::filled(&[batch, 1], 1.0));
        let bb = g.matmul(ones, bv)?;
        g.add(z, bb)
    }

    fn activate(&self, g: &mut Graph, z: Var) -> Result<Var> {
        match self.spec.activation {
            Activation::Relu => g.relu(z),
            Activation::Tanh => g.tanh(z),
        }
    }

    /// Encoder output `r(x)` with shape `[batch, embed_dim]`.
    pub fn representation(&self, g: &mut Graph, w: Var, x: Var) -> Result<Var> {
        let batch = self.check_input(g, x)?;
        let mut h = g.scale(x, 1.0 / PIXEL_MAX)?;
        let layers = self.layout.len() / 2 - 1;
        for layer in 0..layers {
            let z = self.dense(g, w, h, layer, batch)?;
            h = self.activate(g, z)?;
        }
        Ok(h)
    }

    /// Linear head applied to a representation batch.
    pub fn head(&self, g: &mut Graph, w: Var, rep: Var) -> Result<Var> {
        let batch = g.shape(rep)[0];
        let head_layer = self.layout.len() / 2 - 1;
        self.dense(g, w, rep, head_layer, batch)
    }

    /// Class scores with shape `[batch, n_classes]`.
    pub fn logits(&self, g: &mut Graph, w: Var, x: Var) -> Result<Var> {
        let rep = self.representation(g, w, x)?;
        self.head(g, w, rep)
    }

    /// Non-differentiable convenience: logits for a parameter vector.
    pub fn eval_logits(&self, params: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = g.constant(params.clone());
        let xv = g.constant(x.clone());
        let out = self.logits(&mut g, w, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn eval_representation(&self, params: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = g.constant(params.clone());
        let xv = g.constant(x.clone());
        let out = self.representation(&mut g, w, xv)?;
        Ok(g.value(out).clone())
    }
}

/// Parameter vector paired with its network. Immutable once built; updates
/// produce new values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub net: Network,
    pub params: Tensor,
}

impl MetaModel {
    /// Uniform initialisation in `[-s, s]` with `s = 1/sqrt(fan_in)` for each layer.
    pub fn init(spec: ArchSpec, seed: u64) -> Result<Self> {
        let net = Network::new(spec)?;
        let mut rng = rng_for(seed, &[0x1417]);
        let mut params = vec![0.0; net.n_params()];
        for pair in net.layout.chunks(2) {
            let fan_in = pair[0].shape[0] as f64;
            let s = 1.0 / libm::sqrt(fan_in);
            for e in pair {
                for p in &mut params[e.offset..e.offset + e.len()] {
                    *p = rng.random_range(-s..=s);
                }
            }
        }
        let params = Tensor::new(vec![params.len()], params)?;
        Ok(MetaModel { net, params })
    }

    pub fn from_params(net: Network, params: Tensor) -> Result<Self> {
        if params.shape() != [net.n_params()] {
            return Err(Error::TensorSize {
                shape: params.shape().to_vec(),
                expected: net.n_params(),
                actual: params.numel(),
            });
        }
        Ok(MetaModel { net, params })
    }

    pub fn with_params(&self, params: Tensor) -> Result<Self> {
        Self::from_params(self.net.clone(), params)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.eval_logits(&self.params, x)
    }

    pub fn representation(&self, x: &Tensor) -> Result<Tensor> {
        self.net.eval_representation(&self.params, x)
    }
}

/// Mean negative log-likelihood of the true classes.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = match g.shape(logits) {
        [r, c] => (*r, *c),
        s => {
            return Err(Error::Shape {
                node: logits.index(),
                op: "cross_entropy",
                detail: format!("expected [batch, classes], got {s:?}"),
            })
        }
    };
    if labels.len() != rows {
        return Err(Error::Shape {
            node: logits.index(),
            op: "cross_entropy",
            detail: format!("{} labels for {rows} rows", labels.len()),
        });
    }
    let mut pick = vec![0.0; rows * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        pick[r * classes + y] = -1.0 / rows as f64;
    }
    let pick = g.constant(Tensor::new(vec![rows, classes], pick)?);
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, pick)?;
    g.sum(picked)
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let (rows, _) = logits.rows_cols().expect("logits are 2-D");
    (0..rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count()
}
