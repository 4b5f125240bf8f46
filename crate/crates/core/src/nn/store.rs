use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable parameters receive gradients and optimizer updates; buffers
/// (batch-norm running statistics) are state that is saved but never trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
}

/// How [`ParamStore::init`] fills an entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation √(2 / fan_in).
    KaimingNormal { fan_in: usize },
    Constant(f64),
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub value: Tensor<T>,
    pub kind: EntryKind,
    pub init: Init,
}

/// Ordered map from hierarchical name (`enc.rgb.stage1.block0.conv1.weight`)
/// to tensor. Iteration follows registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    fn insert(&mut self, name: &str, shape: &[usize], kind: EntryKind, init: Init) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(Error::Invariant(format!("parameter name `{name}` registered twice")));
        }
        let value = match init {
            Init::Constant(c) => Tensor::full(shape.to_vec(), T::from_f64_lossy(c)),
            Init::KaimingNormal { .. } => Tensor::zeros(shape.to_vec()),
        };
        let (idx, _) = self.entries.insert_full(name.to_string(), Entry { value, kind, init });
        Ok(ParamId(idx))
    }

    pub fn add_param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.insert(name, shape, EntryKind::Param, init)
    }

    pub fn add_buffer(&mut self, name: &str, shape: &[usize], fill: f64) -> Result<ParamId> {
        self.insert(name, shape, EntryKind::Buffer, Init::Constant(fill))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> (&str, &Entry<T>) {
        let (name, e) = self.entries.get_index(id.0).expect("valid parameter id");
        (name, e)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entry(id).0
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Entry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, e))| (ParamId(i), n.as_str(), e))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(|(_, _, e)| e.kind == EntryKind::Param)
            .map(|(id, _, _)| id)
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.iter()
            .filter(|(_, _, e)| e.kind == EntryKind::Param)
            .map(|(_, _, e)| e.value.numel())
            .sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, e)| e.kind == EntryKind::Param && n.starts_with(prefix))
            .map(|(_, _, e)| e.value.numel())
            .sum()
    }

    /// Re-draw every entry from its [`Init`] rule. Each entry gets its own
    /// generator seeded from `(seed, name)`, so values do not depend on
    /// registration order or on which other layers exist.
    pub fn init(&mut self, seed: u64) {
        for (name, entry) in self.entries.iter_mut() {
            match entry.init {
                Init::Constant(c) => entry.value.data_mut().fill(T::from_f64_lossy(c)),
                Init::KaimingNormal { fan_in } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, name));
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for v in entry.value.data_mut() {
                        *v = T::from_f64_lossy(normal.sample(&mut rng));
                    }
                }
            }
        }
    }

    /// Copy of the store with every value converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        Entry {
                            value: e.value.cast(),
                            kind: e.kind,
                            init: e.init,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Mix a run seed with a name into an independent generator seed.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
