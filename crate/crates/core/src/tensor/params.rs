use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Named parameter tree. Paths are dot-separated, e.g. `enc.block0.ff1.w1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter path.
pub type Grads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every entry of `other` whose name exists here with the same
    /// shape; returns the names copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for (name, value) in other.iter() {
            if let Some(dst) = self.params.get_mut(name) {
                if dst.shape() == value.shape() {
                    *dst = value.clone();
                    copied.push(name.clone());
                }
            }
        }
        copied
    }

    /// Keeps only parameters whose path starts with one of `prefixes`.
    pub fn filtered(&self, prefixes: &[&str]) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { params }
    }
}

/// Seeded parameter initializer.
pub struct ParamInit<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamInit<'_> {
    /// Glorot-uniform `[fan_in × fan_out]` matrix.
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], a);
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.store
            .insert(name, Tensor::new(shape.to_vec(), data).expect("shape product"));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape, value));
    }

    /// `prefix.w: [in × out]` and `prefix.b: [out]`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.glorot(&format!("{prefix}.w"), fan_in, fan_out);
        self.zeros(&format!("{prefix}.b"), &[fan_out]);
    }
}

/// A tape plus lazily bound parameters for one forward/backward pass.
pub struct Session<'p> {
    tape: Tape,
    params: &'p ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'p> Session<'p> {
    /// Parameters are bound as gradient-requiring leaves.
    pub fn train(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    /// Parameters are bound as constants; nothing is recorded for backward.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::train(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.tape.leaf(value, self.trainable)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x · W + b` with `prefix.w`, `prefix.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    /// Gradients of every bound parameter after `backward`.
    pub fn grads(&self) -> Grads {
        self.bound
            .iter()
            .filter_map(|(name, &v)| {
                let g = self.tape.grad(v)?;
                let shape = self.tape.shape(v).to_vec();
                Some((name.clone(), Tensor::new(shape, g.to_vec()).ok()?))
            })
            .collect()
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Session<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
