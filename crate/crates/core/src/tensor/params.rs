use super::{Gradients, Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MEMC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Keeps only the first `len` parameters.
    pub fn truncate(&mut self, len: usize) {
        self.names.truncate(len);
        self.values.truncate(len);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Records every parameter as a constant (frozen).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    /// Gradients for bound parameters, zero-filled where none flowed.
    pub fn collect_grads(&self, bound: &[Var<'_>], grads: &Gradients) -> Vec<Tensor> {
        bound.iter().map(|v| grads.wrt_or_zeros(*v)).collect()
    }

    /// Copies every same-named, same-shaped tensor from `other`; returns the
    /// number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (name, value) in other.names.iter().zip(&other.values) {
            if let Some(id) = self.find(name) {
                if self.values[id.0].shape() == value.shape() {
                    self.values[id.0] = value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Serializes as `"MEMC"` followed by, per entry: name length (u64),
    /// name bytes, rank (u64), dims (u64 each), raw `f64` values; all
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, t) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let err = |m: &str| TensorError::Checkpoint(m.to_string());
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let mut r = Reader { bytes, at: 4 };
        let mut store = ParamStore::new();
        while r.at < bytes.len() {
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| err("name is not utf-8"))?.to_string();
            let rank = r.u64()? as usize;
            if rank > 16 {
                return Err(err("rank too large"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| err("tensor too large"))?;
            let raw = r.take(numel)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            store.add(name, Tensor::new(&shape, data)?);
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
