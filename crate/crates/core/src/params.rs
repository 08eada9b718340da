//! Named parameter storage, forward contexts and the checkpoint format.
//!
//! Checkpoint layout (`TAMBA-CKPT v1`):
//!
//! ```text
//! TAMBA-CKPT v1
//! manifest <count> <payload-bytes>
//! <name> <shape> <byte-offset>      (one line per tensor, shape like [4,8] or [])
//! end
//! <payload: little-endian f64 values, tensors back to back>
//! ```

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{numel, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;

pub const CHECKPOINT_HEADER: &str = "TAMBA-CKPT v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered map from hierarchical names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid parameter name {name:?}")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count over all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Sum of element counts of all parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            let missing: Vec<_> = self
                .names
                .iter()
                .filter(|n| !other.index.contains_key(*n))
                .take(3)
                .collect();
            return Err(Error::Checkpoint(format!(
                "parameter sets differ ({} vs {} tensors); missing e.g. {missing:?}",
                self.len(),
                other.len()
            )));
        }
        for (i, t) in other.tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: model {:?}, checkpoint {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{CHECKPOINT_HEADER}\n");
        let payload_len: usize = self.tensors.iter().map(|t| t.len() * 8).sum();
        head.push_str(&format!("manifest {} {}\n", self.len(), payload_len));
        let mut offset = 0;
        for (name, t) in self.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("{name} [{}] {offset}\n", dims.join(",")));
            offset += t.len() * 8;
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(payload_len);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not utf-8".into()))
        };
        if next_line()? != CHECKPOINT_HEADER {
            return Err(bad(format!("missing `{CHECKPOINT_HEADER}` header")));
        }
        let manifest = next_line()?;
        let mut parts = manifest.split(' ');
        let (count, payload_len) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("manifest"), Some(c), Some(p), None) => (
                c.parse::<usize>().map_err(|e| bad(format!("count: {e}")))?,
                p.parse::<usize>().map_err(|e| bad(format!("payload: {e}")))?,
            ),
            _ => return Err(bad(format!("bad manifest line {manifest:?}"))),
        };
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?;
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 3 {
                return Err(bad(format!("bad manifest entry {line:?}")));
            }
            let shape_str = fields[1]
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| bad(format!("bad shape in {line:?}")))?;
            let shape: Vec<usize> = if shape_str.is_empty() {
                Vec::new()
            } else {
                shape_str
                    .split(',')
                    .map(|d| d.parse().map_err(|e| bad(format!("shape {line:?}: {e}"))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = fields[2]
                .parse()
                .map_err(|e| bad(format!("offset {line:?}: {e}")))?;
            entries.push((fields[0].to_string(), shape, offset));
        }
        if next_line()? != "end" {
            return Err(bad("manifest not terminated by `end`".into()));
        }
        let payload = &bytes[pos..];
        if payload.len() != payload_len {
            return Err(bad(format!(
                "payload is {} bytes, manifest says {payload_len}",
                payload.len()
            )));
        }
        let mut store = ParamStore::new();
        for (name, shape, offset) in entries {
            let n = numel(&shape);
            let chunk = payload
                .get(offset..offset + n * 8)
                .ok_or_else(|| bad(format!("tensor {name} overruns payload")))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Creates parameters with seeded initial values.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Uniform Glorot-style init for a `[fan_in, fan_out]` matrix.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], scale)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], scale: f64) -> Result<ParamId> {
        let t = Tensor::uniform(shape, scale, &mut self.rng);
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.insert(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::full(shape, value))
    }
}

/// A forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    /// `trainable` marks bound parameters as `requires_grad`.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    /// Continues on an existing tape with every stored parameter already
    /// bound to `params` (aligned with the store order).
    pub fn from_parts(store: &'a ParamStore, g: Graph, params: &[Var]) -> Result<Self> {
        if params.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} parameter bindings for a store of {}",
                params.len(),
                store.len()
            )));
        }
        Ok(Self {
            g,
            store,
            bound: params.iter().map(|&v| Some(v)).collect(),
            trainable: true,
        })
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Runs backward from `loss` and returns one gradient per stored
    /// parameter (zeros for parameters the pass never touched).
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Tensor>> {
        self.g.backward(loss)?;
        Ok(self
            .store
            .ids()
            .map(|id| match self.bound[id.0].and_then(|v| self.g.grad(v)) {
                Some(t) => t,
                None => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect())
    }
}
