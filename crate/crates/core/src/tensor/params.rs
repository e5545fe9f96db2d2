use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Names are unique and shapes are fixed once a
/// parameter has been registered.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(TensorError::Invalid {
                op: "register",
                msg: format!("duplicate parameter name `{name}`"),
            });
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Seeded uniform fan-in initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    pub fn register_kaiming<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.register(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.lookup
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name)?;
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(TensorError::ParamShape {
                name: name.to_string(),
                expected: cur.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// Tape handles for a [`ModelParams`] set, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient of every parameter; parameters the loss does not reach get
    /// zeros.
    pub fn collect(&self, params: &ModelParams, grads: &Gradients) -> ParamGrads {
        ParamGrads {
            grads: self
                .vars
                .iter()
                .zip(&params.tensors)
                .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn new(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}

const CKPT_MAGIC: &[u8] = b"ESLR-CKPT1";

/// Text header stored ahead of the parameter blocks in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub iteration: u64,
    pub seed: u64,
    /// Effective run configuration, as TOML.
    pub config: String,
}

/// Layout: magic, `u64` header length, TOML header, `u64` parameter count,
/// then per parameter `u32` name length, name, `u32` rank, `u64` dims and
/// little-endian f64 values.
pub fn save_checkpoint<W: Write>(
    mut w: W,
    header: &CheckpointHeader,
    params: &ModelParams,
) -> Result<()> {
    let text = toml::to_string(header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, limit: u64, what: &str) -> Result<usize> {
    let n = read_u64(r)?;
    if n > limit {
        return Err(TensorError::Checkpoint(format!("{what} {n} exceeds limit {limit}")));
    }
    Ok(n as usize)
}

/// Reads a checkpoint into its header and a list of named tensors, in file
/// order.
pub fn load_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 10];
    r.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic, not an ESLR-CKPT1 file".into()));
    }
    let hlen = read_len(&mut r, 1 << 24, "header length")?;
    let mut text = vec![0u8; hlen];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let header: CheckpointHeader =
        toml::from_str(&text).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    let count = read_len(&mut r, 1 << 20, "parameter count")?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_len(&mut r, 1 << 32, "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok((header, out))
}

impl ModelParams {
    /// Overwrites every parameter from a loaded checkpoint. Every registered
    /// name must be present with a matching shape; extra names are an error.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                named.len(),
                self.len()
            )));
        }
        for (name, t) in named {
            self.set(&name, t)?;
        }
        Ok(())
    }
}
