//! Parameter storage, tape binding, small layer building blocks and the
//! checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "SSVOSCK1"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          tensor data, f64 little-endian, concatenated
//! ```
//!
//! The header is `{"config": <ModelConfig>, "tensors": {name: {"shape": [..],
//! "offset": byte offset into the data section}}}`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Grads, Tape, Tensor, Var};

const MAGIC: &[u8; 8] = b"SSVOSCK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning [`ParamSet`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(shape_err!(
                "parameter {} is {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Writes the checkpoint described in the module docs.
    pub fn save<C: Serialize>(&self, path: &Path, config: &C) -> Result<()> {
        let mut tensors = BTreeMap::new();
        let mut offset = 0usize;
        for (name, value) in self.names.iter().zip(&self.values) {
            tensors.insert(name.clone(), TensorEntry { shape: value.shape().to_vec(), offset });
            offset += value.numel() * 8;
        }
        let header = serde_json::to_vec(&Header { config, tensors })
            .map_err(|e| Error::Input(format!("checkpoint header: {e}")))?;
        let mut buf = Vec::with_capacity(16 + header.len() + offset);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for value in &self.values {
            for v in value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint, returning its config and a name → tensor map.
    pub fn read_checkpoint<C: for<'de> Deserialize<'de>>(
        path: &Path,
    ) -> Result<(C, BTreeMap<String, Tensor>)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::Input(format!("{}: {why}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header<C> =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let data = &bytes[data_start..];
        let mut out = BTreeMap::new();
        for (name, entry) in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + n * 8;
            if end > data.len() {
                return Err(bad(&format!("tensor {name} runs past end of file")));
            }
            let vals = data[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.insert(name, Tensor::new(&entry.shape, vals)?);
        }
        Ok((header.config, out))
    }

    /// Replaces every parameter by the same-named tensor in `loaded`.
    pub fn load_from(&mut self, loaded: &BTreeMap<String, Tensor>) -> Result<()> {
        for i in 0..self.values.len() {
            let t = loaded
                .get(&self.names[i])
                .ok_or_else(|| Error::Input(format!("checkpoint lacks parameter {}", self.names[i])))?;
            self.set(ParamId(i), t.clone())?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header<C> {
    config: C,
    tensors: BTreeMap<String, TensorEntry>,
}

/// A tape together with the parameter set its forward pass reads. Parameters
/// are bound to tape leaves lazily, once per tape.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    params: &'a ParamSet,
    bound: Vec<Option<Var>>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamSet) -> Self {
        Ctx { tape, params, bound: vec![None; params.len()] }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound parameter.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.get(v)).map(|g| (ParamId(i), g.clone())))
            .collect()
    }
}

impl Deref for Ctx<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        self.tape
    }
}

impl DerefMut for Ctx<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        self.tape
    }
}

/// Seeded parameter initializer.
pub struct Init<'a> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.params.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::full(shape, 1.0))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let bound = (1.0 / d_in as f64).sqrt();
        Linear {
            w: self.uniform(&format!("{name}.w"), &[d_in, d_out], bound),
            b: self.zeros(&format!("{name}.b"), &[d_out]),
        }
    }

    pub fn linear_zero(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.zeros(&format!("{name}.w"), &[d_in, d_out]),
            b: self.zeros(&format!("{name}.b"), &[d_out]),
        }
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Conv {
        let bound = (1.0 / (c_in * k * k) as f64).sqrt();
        Conv {
            k: self.uniform(&format!("{name}.k"), &[c_out, c_in, k, k], bound),
            b: self.zeros(&format!("{name}.b"), &[c_out]),
            stride,
            pad,
        }
    }

    pub fn conv_zero(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Conv {
        Conv {
            k: self.zeros(&format!("{name}.k"), &[c_out, c_in, k, k]),
            b: self.zeros(&format!("{name}.b"), &[c_out]),
            stride,
            pad,
        }
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> Norm {
        Norm { g: self.ones(&format!("{name}.g"), &[c]), b: self.zeros(&format!("{name}.b"), &[c]) }
    }
}

/// `y = x·W + b` over the last axis of a 2-D input.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        let y = ctx.matmul(x, w)?;
        ctx.add_bias_rows(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub k: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (k, b) = (ctx.p(self.k), ctx.p(self.b));
        let y = ctx.conv2d(x, k, self.stride, self.pad)?;
        ctx.add_bias_channels(y, b)
    }
}

/// Layer norm over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.g), ctx.p(self.b));
        ctx.layer_norm(x, g, b)
    }

    /// Layer norm across channels at every location of a `[c,h,w]` map.
    pub fn forward_channels(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.shape(x).to_vec();
        let flat = ctx.reshape(x, &[s[0], s[1] * s[2]])?;
        let rows = ctx.transpose(flat)?;
        let normed = self.forward(ctx, rows)?;
        let back = ctx.transpose(normed)?;
        ctx.reshape(back, &s)
    }
}

/// `[c,h,w]` → `[h·w, c]`.
pub fn to_rows(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let s = ctx.shape(x).to_vec();
    let flat = ctx.reshape(x, &[s[0], s[1] * s[2]])?;
    ctx.transpose(flat)
}

/// `[h·w, c]` → `[c,h,w]`.
pub fn from_rows(ctx: &mut Ctx, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = ctx.shape(x)[1];
    let t = ctx.transpose(x)?;
    ctx.reshape(t, &[c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip() {
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init { params: &mut params, rng: &mut rng };
        init.linear("a", 3, 4);
        init.conv("b", 2, 5, 3, 1, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        params.save(&path, &"cfg").unwrap();
        let (cfg, loaded): (String, _) = ParamSet::read_checkpoint(&path).unwrap();
        assert_eq!(cfg, "cfg");
        let mut fresh = params.clone();
        for id in fresh.clone().ids() {
            let shape = fresh.get(id).shape().to_vec();
            fresh.set(id, Tensor::zeros(&shape)).unwrap();
        }
        fresh.load_from(&loaded).unwrap();
        for id in params.ids() {
            assert_eq!(params.get(id), fresh.get(id));
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(ParamSet::read_checkpoint::<String>(&path), Err(Error::Input(_))));
    }

    #[test]
    fn ctx_binds_each_param_once() {
        let mut params = ParamSet::default();
        let id = params.add("x", Tensor::full(&[2], 1.5));
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &params);
        let a = ctx.p(id);
        let b = ctx.p(id);
        assert_eq!(a, b);
        let y = ctx.mul(a, b).unwrap();
        let l = ctx.sum(y);
        let g = ctx.backward(l).unwrap();
        let pg = ctx.param_grads(&g);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1.data(), &[3.0, 3.0]);
    }
}
