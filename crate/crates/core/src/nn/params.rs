//! Named parameter collections with bit-exact serialization.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"RLPARAMS";
const FORMAT_VERSION: u32 = 1;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered set of named tensors belonging to one model.
///
/// A frozen store enters every [`Graph`](super::Graph) as constants, so no
/// gradient is ever produced for it; `freeze` is how the personalization
/// stage proves it cannot touch a backbone.
pub struct ParamStore<S> {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    frozen: bool,
}

impl<S: Scalar> std::fmt::Debug for ParamStore<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.tensors.len())
            .field("scalars", &self.count())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            frozen: self.frozen,
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { uid: NEXT_UID.fetch_add(1, Ordering::Relaxed), names: Vec::new(), tensors: Vec::new(), frozen: false }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_randn<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let t = Tensor::randn(shape, std, rng);
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        assert!(!self.frozen, "attempt to mutate a frozen parameter store");
        &mut self.tensors[id.0]
    }

    /// Mutable views of every tensor, in store order.
    pub fn slices_mut(&mut self) -> Vec<&mut [S]> {
        assert!(!self.frozen, "attempt to mutate a frozen parameter store");
        self.tensors.iter_mut().map(|t| t.data_mut()).collect()
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

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Serialize to the versioned binary format with `fingerprint` embedded.
    pub fn to_bytes(&self, fingerprint: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.count() * S::BYTES + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_str(&mut out, S::DTYPE);
        write_str(&mut out, fingerprint);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            write_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parse bytes written by [`ParamStore::to_bytes`]; returns the store
    /// and its embedded fingerprint.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a parameter file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported parameter format version {version}")));
        }
        let dtype = r.string()?;
        if dtype != S::DTYPE {
            return Err(Error::Format(format!("parameter file holds {dtype}, expected {}", S::DTYPE)));
        }
        let fingerprint = r.string()?;
        let n = r.u64()? as usize;
        let mut store = Self::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u64()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * S::BYTES)?;
            let data = raw.chunks(S::BYTES).map(S::read_le).collect();
            store.add(name, Tensor::new(&shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in parameter file".into()));
        }
        Ok((store, fingerprint))
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_bytes("").as_slice());
        hex::encode(h.finalize())
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated parameter file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8 name".into()))
    }
}
