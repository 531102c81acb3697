//! `.hfpw` weight files.
//!
//! ```text
//! "HFPW" | u32 version=1
//! config: u32 d_model, n_layers, n_heads, vocab_size, max_seq
//!         f32 rope_theta, rms_eps | u8 tied | u32 d_hidden[n_layers]
//! table:  u32 count, then per tensor
//!         u16 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | u64 offset
//! payload: row-major f32 data at each tensor's absolute byte offset
//! ```
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{LayerWeights, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"HFPW";
const VERSION: u32 = 1;
const TABLE: &str = "tensor table";

struct TensorRef<'a> {
    name: String,
    dims: Vec<usize>,
    data: &'a [f32],
}

fn mat(name: String, m: &Matrix<f32>) -> TensorRef<'_> {
    TensorRef {
        name,
        dims: vec![m.rows(), m.cols()],
        data: m.data(),
    }
}

fn vec(name: String, v: &[f32]) -> TensorRef<'_> {
    TensorRef {
        name,
        dims: vec![v.len()],
        data: v,
    }
}

fn tensors(model: &Model) -> Vec<TensorRef<'_>> {
    let mut out = vec![mat("embedding".into(), &model.embedding)];
    for (l, w) in model.layers.iter().enumerate() {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push(vec(p("attn_norm"), &w.attn_norm));
        out.push(mat(p("wq"), &w.wq));
        out.push(mat(p("wk"), &w.wk));
        out.push(mat(p("wv"), &w.wv));
        out.push(mat(p("wo"), &w.wo));
        out.push(vec(p("mlp_norm"), &w.mlp_norm));
        out.push(mat(p("w_gate"), &w.w_gate));
        out.push(mat(p("w_up"), &w.w_up));
        out.push(mat(p("w_down"), &w.w_down));
    }
    out.push(vec("final_norm".into(), &model.final_norm));
    if let Some(head) = &model.lm_head {
        out.push(mat("lm_head".into(), head));
    }
    out
}

/// Serializes a model into the `.hfpw` byte layout.
pub fn model_bytes(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.d_model, c.n_layers, c.n_heads, c.vocab_size, c.max_seq] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.rope_theta.to_le_bytes());
    buf.extend_from_slice(&c.rms_eps.to_le_bytes());
    buf.push(c.tied_embeddings as u8);
    for &dh in &c.d_hidden {
        buf.extend_from_slice(&(dh as u32).to_le_bytes());
    }

    let list = tensors(model);
    let table_len: usize = 4 + list
        .iter()
        .map(|t| 2 + t.name.len() + 1 + 4 * t.dims.len() + 8)
        .sum::<usize>();
    let mut offset = (buf.len() + table_len) as u64;
    buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
    for t in &list {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.dims.len() as u8);
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.data.len() as u64;
    }
    for t in &list {
        for v in t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(field, "file truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

struct Entry {
    dims: Vec<usize>,
    offset: usize,
}

struct Tensors<'a> {
    buf: &'a [u8],
    entries: HashMap<String, Entry>,
}

impl Tensors<'_> {
    fn take(&mut self, name: String, dims: &[usize]) -> Result<Vec<f32>> {
        let e = self
            .entries
            .remove(&name)
            .ok_or_else(|| Error::format(TABLE, format!("missing tensor '{name}'")))?;
        if e.dims != dims {
            return Err(Error::Shape(format!(
                "tensor '{name}' has dims {:?}, config implies {:?}",
                e.dims, dims
            )));
        }
        let n: usize = dims.iter().product();
        Ok(self.buf[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        Matrix::new(rows, cols, self.take(name, &[rows, cols])?)
    }
}

/// Parses `.hfpw` bytes.
pub fn parse_model(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "header.magic")? != MAGIC {
        return Err(Error::format("header.magic", "expected \"HFPW\""));
    }
    let version = r.u32("header.version")?;
    if version != VERSION {
        return Err(Error::format(
            "header.version",
            format!("unsupported version {version}"),
        ));
    }
    let d_model = r.u32("config.d_model")? as usize;
    let n_layers = r.u32("config.n_layers")? as usize;
    let n_heads = r.u32("config.n_heads")? as usize;
    let vocab_size = r.u32("config.vocab_size")? as usize;
    let max_seq = r.u32("config.max_seq")? as usize;
    let rope_theta = r.f32("config.rope_theta")?;
    let rms_eps = r.f32("config.rms_eps")?;
    let tied = match r.u8("config.tied")? {
        0 => false,
        1 => true,
        v => return Err(Error::format("config.tied", format!("flag value {v}"))),
    };
    if n_layers > (buf.len() - r.pos) / 4 {
        return Err(Error::format("config.d_hidden", "file truncated"));
    }
    let d_hidden = (0..n_layers)
        .map(|_| r.u32("config.d_hidden").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        d_model,
        n_layers,
        n_heads,
        d_hidden,
        vocab_size,
        max_seq,
        rope_theta,
        rms_eps,
        tied_embeddings: tied,
    };
    config.validate()?;

    let count = r.u32(TABLE)? as usize;
    let mut entries: HashMap<String, Entry> = HashMap::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16(TABLE)? as usize;
        let name = std::str::from_utf8(r.take(len, TABLE)?)
            .map_err(|_| Error::format(TABLE, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u8(TABLE)? as usize;
        let dims = (0..rank)
            .map(|_| r.u32(TABLE).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64(TABLE)?;
        let bytes = dims
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64));
        let end = bytes.and_then(|b| offset.checked_add(b));
        if end.is_none_or(|end| end > buf.len() as u64) {
            return Err(Error::format(
                TABLE,
                format!("tensor '{name}' extends past end of file"),
            ));
        }
        if entries.insert(name.clone(), Entry { dims, offset: offset as usize }).is_some() {
            return Err(Error::format(TABLE, format!("duplicate tensor '{name}'")));
        }
    }

    let mut t = Tensors { buf, entries };
    let d = d_model;
    let embedding = t.matrix("embedding".into(), vocab_size, d)?;
    let mut layers = Vec::with_capacity(n_layers);
    for (l, &dh) in config.d_hidden.iter().enumerate() {
        let p = |s: &str| format!("layers.{l}.{s}");
        layers.push(LayerWeights {
            attn_norm: t.take(p("attn_norm"), &[d])?,
            wq: t.matrix(p("wq"), d, d)?,
            wk: t.matrix(p("wk"), d, d)?,
            wv: t.matrix(p("wv"), d, d)?,
            wo: t.matrix(p("wo"), d, d)?,
            mlp_norm: t.take(p("mlp_norm"), &[d])?,
            w_gate: t.matrix(p("w_gate"), dh, d)?,
            w_up: t.matrix(p("w_up"), dh, d)?,
            w_down: t.matrix(p("w_down"), d, dh)?,
        });
    }
    let final_norm = t.take("final_norm".into(), &[d])?;
    let lm_head = if tied {
        None
    } else {
        Some(t.matrix("lm_head".into(), vocab_size, d)?)
    };
    if let Some(extra) = t.entries.keys().min() {
        return Err(Error::format(TABLE, format!("unexpected tensor '{extra}'")));
    }
    let model = Model {
        config,
        embedding,
        layers,
        final_norm,
        lm_head,
    };
    model.validate()?;
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_model(&buf)
}
