//! Named parameter storage and the binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use super::DiffError;

const CHECKPOINT_MAGIC: &[u8; 8] = b"CTXCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Accumulated gradient, same shape as `value`.
    pub grad: Tensor,
}

/// Named trainable parameters plus the optimizer step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), DiffError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, DiffError> {
        self.get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Registers the named parameter on a graph (idempotent per graph).
    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var, DiffError> {
        if let Some(v) = g.param_var(name) {
            return Ok(v);
        }
        g.param(name, self.require(name)?)
    }

    /// Stores `grads` into the per-parameter gradient buffers.
    pub fn set_grads(&mut self, grads: &Gradients) {
        for (name, p) in self.params.iter_mut() {
            match grads.get(name) {
                Some(g) => p.grad = g.clone(),
                None => p.grad = Tensor::zeros(p.value.shape()),
            }
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    /// Copy restricted to names accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            step: self.step,
        }
    }

    /// SHA-256 over names, shapes and value bits of the selected parameters.
    pub fn hash_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(k, _)| keep(k)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    /// Bitwise equality of every value.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.value.bit_eq(&b.value))
    }

    /// Writes the checkpoint: magic, version, step, then per parameter the
    /// name, rank, dims and little-endian `f64` payload.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, p) in &self.params {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for d in p.value.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, DiffError> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], DiffError> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)
                .map_err(|e| DiffError::Checkpoint(e.to_string()))?;
            Ok(buf)
        }
        let magic: [u8; 8] = take(&mut r)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(DiffError::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(DiffError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let step = u64::from_le_bytes(take(&mut r)?);
        let count = u32::from_le_bytes(take(&mut r)?);
        let mut store = ParamStore::new();
        store.step = step;
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut r)?) as usize;
            let mut nb = vec![0u8; nlen];
            r.read_exact(&mut nb)
                .map_err(|e| DiffError::Checkpoint(e.to_string()))?;
            let name = String::from_utf8(nb).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
            let rank = u32::from_le_bytes(take(&mut r)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut r)?) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(&mut r)?));
            }
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            s.insert("a", Tensor::scalar(2.0)),
            Err(DiffError::DuplicateParam(_))
        ));
    }

    #[test]
    fn grad_buffers_match_shapes() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(s.grad("w").unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert(
            "b",
            Tensor::vector(vec![-0.0, 1e-300, std::f64::consts::PI]),
        )
        .unwrap();
        s.insert(
            "a",
            Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap(),
        )
        .unwrap();
        s.bump_step();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::read_checkpoint(&buf[..]).unwrap();
        assert!(s.bit_eq(&back));
        assert_eq!(back.step(), 1);
        assert_eq!(s.hash(), back.hash());
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        assert!(ParamStore::read_checkpoint(&b"NOTACKPT"[..]).is_err());
    }
}
