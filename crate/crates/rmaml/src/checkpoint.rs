//! Model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RMCK"                     magic
//! u32    version             = 1
//! u32 ×3 height, width, channels
//! u32    hidden layer count H, then H × u32 widths
//! u32    embed_dim
//! u32    n_classes
//! u8     activation          0 = relu, 1 = tanh
//! u32    layout entry count L, then per entry:
//!          u16 name length, UTF-8 name,
//!          u8 block (0 = representation, 1 = head),
//!          u8 rank, rank × u32 extents,
//!          u64 offset into the parameter vector
//! u64    parameter count P
//! P × f64 parameters (IEEE-754, little-endian)
//! ```

use std::fs;
use std::path::Path;

use rmaml_core::model::{Activation, ArchSpec, Block, MetaModel, Network, ParamEntry};
use rmaml_core::Tensor;

use crate::bytes::{u32_field, Reader};
use crate::error::{Result, RunError};

pub const MAGIC: &[u8; 4] = b"RMCK";
pub const VERSION: u32 = 1;

pub fn encode(model: &MetaModel) -> Result<Vec<u8>> {
    let spec = model.net.spec();
    let mut out = Vec::with_capacity(64 + 8 * model.params.numel());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    let (h, w, c) = spec.input_dims;
    for v in [h, w, c] {
        out.extend(u32_field(v, "input dim")?);
    }
    out.extend(u32_field(spec.hidden.len(), "hidden layers")?);
    for &v in &spec.hidden {
        out.extend(u32_field(v, "hidden width")?);
    }
    out.extend(u32_field(spec.embed_dim, "embed_dim")?);
    out.extend(u32_field(spec.n_classes, "n_classes")?);
    out.push(match spec.activation {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    let layout = model.net.layout();
    out.extend(u32_field(layout.len(), "layout entries")?);
    for e in layout {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| RunError::Config(format!("parameter name {} too long", e.name)))?;
        out.extend(len.to_le_bytes());
        out.extend(name);
        out.push(match e.block {
            Block::Representation => 0,
            Block::Head => 1,
        });
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend(u32_field(d, "extent")?);
        }
        out.extend((e.offset as u64).to_le_bytes());
    }
    out.extend((model.params.numel() as u64).to_le_bytes());
    for v in model.params.data() {
        out.extend(v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(buf: &[u8], path: &Path) -> Result<MetaModel> {
    let mut r = Reader::new(buf, path);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(RunError::format(path, format!("unsupported checkpoint version {version}")));
    }
    let dims = (r.u32("height")? as usize, r.u32("width")? as usize, r.u32("channels")? as usize);
    let n_hidden = r.u32("hidden count")? as usize;
    let hidden = (0..n_hidden).map(|_| r.u32("hidden width").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let embed_dim = r.u32("embed_dim")? as usize;
    let n_classes = r.u32("n_classes")? as usize;
    let activation = match r.u8("activation")? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        other => return Err(RunError::format(path, format!("unknown activation code {other}"))),
    };
    let spec = ArchSpec { input_dims: dims, hidden, embed_dim, n_classes, activation };
    let n_entries = r.u32("layout count")? as usize;
    let mut layout = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| RunError::format(path, "parameter name is not UTF-8"))?;
        let block = match r.u8("block")? {
            0 => Block::Representation,
            1 => Block::Head,
            other => return Err(RunError::format(path, format!("unknown block code {other}"))),
        };
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("extent").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64("offset")? as usize;
        layout.push(ParamEntry { name, shape, block, offset });
    }
    let n = r.u64("parameter count")? as usize;
    let expected = n.checked_mul(8).ok_or_else(|| RunError::format(path, "parameter count overflows"))?;
    if r.remaining() < expected {
        return Err(RunError::format(
            path,
            format!("truncated parameters: expected {} bytes, file has {}", r.pos() + expected, buf.len()),
        ));
    }
    let params = (0..n).map(|_| r.f64("parameter")).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let net = Network::with_layout(spec, layout)?;
    Ok(MetaModel::from_params(net, Tensor::new(vec![n], params)?)?)
}

pub fn save(model: &MetaModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| RunError::io(path, e))
}

pub fn load(path: &Path) -> Result<MetaModel> {
    let buf = fs::read(path).map_err(|e| RunError::io(path, e))?;
    decode(&buf, path)
}
