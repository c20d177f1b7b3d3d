//! Named parameter storage with JSON (de)serialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Model parameters keyed by dotted path (e.g. `height_net.conv1.kernel`).
///
/// Iteration order is lexicographic, which keeps serialization and
/// optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// FNV-1a, used to derive a per-parameter RNG stream from its name.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Uniform `[-bound, bound]` initialization from a stream keyed by `(seed, name)`,
    /// so adding or removing other parameters never perturbs this one.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
        let t = Tensor::from_fn(shape, |_| if bound == 0.0 { 0.0 } else { rng.gen_range(-bound..=bound) });
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }

    /// Records every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect();
        BoundParams { vars }
    }

    /// Collects gradients for every bound parameter after `tape.backward`.
    pub fn grads(&self, tape: &Tape, bound: &BoundParams) -> BTreeMap<String, Vec<f64>> {
        bound.vars.iter().map(|(k, v)| (k.clone(), tape.grad_or_zeros(*v))).collect()
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, ParamEntry> = self
            .params
            .iter()
            .map(|(k, v)| (k.as_str(), ParamEntry { shape: v.shape().to_vec(), data: v.data().to_vec() }))
            .collect();
        serde_json::to_string(&map).expect("parameter map serializes")
    }

    /// Parses a parameter document without shape validation.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, ParamEntry> =
            serde_json::from_str(text).map_err(|e| TensorError::Param(format!("invalid parameter JSON: {e}")))?;
        let mut params = BTreeMap::new();
        for (k, e) in map {
            let t = Tensor::new(e.shape, e.data).map_err(|e| TensorError::Param(format!("{k}: {e}")))?;
            params.insert(k, t);
        }
        Ok(Self { params })
    }

    /// Replaces every value from a JSON document whose names and shapes
    /// must match this store exactly.
    pub fn load_json(&mut self, text: &str) -> Result<()> {
        let other = Self::from_json(text)?;
        for name in self.params.keys() {
            if !other.params.contains_key(name) {
                return Err(TensorError::Param(format!("missing parameter `{name}`")));
            }
        }
        for (name, t) in &other.params {
            let Some(own) = self.params.get(name) else {
                return Err(TensorError::Param(format!("unexpected parameter `{name}`")));
            };
            if own.shape() != t.shape() {
                return Err(TensorError::Param(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
        }
        self.params = other.params;
        Ok(())
    }
}

/// Tape handles for a [`ParamStore`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds names to handles that already live on a tape.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Param(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
