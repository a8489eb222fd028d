use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Mat;
use crate::error::{DfnError, Result};

/// Named n-dimensional array. Values are held in `f64` while training and
/// persisted as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DfnError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Rank-1 tensors become a single row.
    pub fn to_mat(&self) -> Mat {
        match self.shape.as_slice() {
            [n] => Mat::from_vec(1, *n, self.data.clone()),
            [r, c] => Mat::from_vec(*r, *c, self.data.clone()),
            [] => Mat::from_vec(1, 1, self.data.clone()),
            _ => Mat::from_vec(1, self.data.len(), self.data.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    frozen: bool,
}

/// All learnable tensors of a model stack, each with a frozen flag.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            entries: Vec::new(),
            index: HashMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(DfnError::InvalidInput(format!("duplicate parameter '{name}'")));
        }
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// `[fan_in, fan_out]` weight drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn bias(&mut self, name: &str, width: usize) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(vec![width]))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freezes every tensor whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = true;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| self.name(*id).starts_with(prefix))
    }

    /// Replaces values of existing tensors by name; shapes must match.
    pub fn load_values(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in tensors {
            let id = self
                .id(name)
                .ok_or_else(|| DfnError::Format(format!("checkpoint tensor '{name}' has no matching parameter")))?;
            let slot = self.tensor_mut(id);
            if slot.shape != t.shape {
                return Err(DfnError::Format(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    t.shape, slot.shape
                )));
            }
            slot.data.clone_from(&t.data);
        }
        Ok(())
    }

    /// Sets every value to zero (used by tests of the zero-network contracts).
    pub fn zero_all(&mut self) {
        for e in &mut self.entries {
            e.tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Named copies of the tensors under `prefix`, in insertion order.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect()
    }

    /// Rounds all values to `f32` precision so that in-memory state equals
    /// what a checkpoint round trip produces.
    pub fn round_to_f32(&mut self, prefix: &str) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.tensor.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn parameter_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.tensor.data.len())
            .sum()
    }
}
