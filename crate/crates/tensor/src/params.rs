use indexmap::IndexMap;
use rand::Rng;

use crate::{Graph, Result, Tensor, TensorError, Var};

/// Named learnable parameters, kept in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let (idx, _) = self.params.insert_full(name, value);
        Ok(idx)
    }

    /// Registers a parameter drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<usize> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.params
            .get_index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Tensor) {
        let (k, v) = self.params.get_index(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub(crate) fn by_index_mut(&mut self, idx: usize) -> &mut Tensor {
        self.params.get_index_mut(idx).expect("parameter index").1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// A consistent copy for a rollout worker.
    pub fn snapshot(&self) -> ParamStore {
        self.clone()
    }

    /// Copies every parameter into `graph` as a tracked leaf, in store order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.values().map(|t| graph.param(t.clone())).collect()
    }

    /// Like [`bind`](Self::bind) but as constants (no gradient tracking).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<Var> {
        self.params
            .values()
            .map(|t| graph.constant(t.clone()))
            .collect()
    }
}
