use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Trainable weights versus non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Buffer,
}

/// A named tensor owned by a [`ParamStore`].
///
/// Frozen weights and all buffers are handed to forward passes detached, so no
/// gradient ever reaches them.
#[derive(Clone)]
pub struct Param {
    name: Arc<str>,
    var: Var,
    kind: ParamKind,
    frozen: Arc<AtomicBool>,
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.name)
            .field("shape", self.var.as_tensor().shape())
            .field("kind", &self.kind)
            .field("frozen", &self.is_frozen())
            .finish()
    }
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.load(Ordering::Relaxed)
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.frozen.store(frozen, Ordering::Relaxed);
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Weight && !self.is_frozen()
    }

    /// The value to use in a forward pass.
    pub fn tensor(&self) -> Tensor {
        if self.is_trainable() {
            self.var.as_tensor().clone()
        } else {
            self.var.as_detached_tensor()
        }
    }

    pub fn set(&self, value: &Tensor) -> Result<()> {
        self.var.set(value)?;
        Ok(())
    }

    pub fn elem_count(&self) -> usize {
        self.var.as_tensor().elem_count()
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self
            .var
            .as_tensor()
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }
}

#[derive(Default)]
struct StoreInner {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// An insertion-ordered collection of named parameters sharing one dtype.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("len", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            inner: Arc::default(),
            dtype,
            device: Device::Cpu,
        }
    }

    fn lock(&self) -> MutexGuard<'_, StoreInner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.lock().params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, name: &str, value: Tensor, kind: ParamKind) -> Result<Param> {
        let mut inner = self.lock();
        if inner.index.contains_key(name) {
            return Err(Error::StructureMismatch(format!("duplicate parameter `{name}`")));
        }
        let value = value.to_dtype(self.dtype)?.contiguous()?;
        let param = Param {
            name: Arc::from(name),
            var: Var::from_tensor(&value)?,
            kind,
            frozen: Arc::new(AtomicBool::new(false)),
        };
        let at = inner.params.len();
        inner.index.insert(name.to_string(), at);
        inner.params.push(param.clone());
        Ok(param)
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        let inner = self.lock();
        inner.index.get(name).map(|&i| inner.params[i].clone())
    }

    pub fn all(&self) -> Vec<Param> {
        self.lock().params.clone()
    }

    pub fn weights(&self) -> Vec<Param> {
        self.all()
            .into_iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .collect()
    }

    pub fn trainable(&self) -> Vec<Param> {
        self.all().into_iter().filter(Param::is_trainable).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.all().iter().map(|p| p.name().to_string()).collect()
    }

    pub fn with_prefix(&self, prefix: &str) -> Vec<Param> {
        self.all()
            .into_iter()
            .filter(|p| has_prefix(p.name(), prefix))
            .collect()
    }

    /// Freezes or unfreezes every weight.
    pub fn set_frozen_all(&self, frozen: bool) {
        for p in self.all() {
            p.set_frozen(frozen);
        }
    }

    pub fn apply_freeze(&self, mask: &FreezeMask) {
        for p in self.all() {
            p.set_frozen(mask.frozen.contains(p.name()));
        }
    }

    /// Number of scalars in weights (trainable or frozen).
    pub fn weight_count(&self) -> usize {
        self.weights().iter().map(Param::elem_count).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(Param::elem_count).sum()
    }

    /// Independent copies of every tensor, in store order.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.all()
            .into_iter()
            .map(|p| Ok((p.name().to_string(), p.var.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites values by name. Every name in `values` must exist with the same shape.
    pub fn restore<'a, I>(&self, values: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    {
        for (name, value) in values {
            let p = self
                .get(name)
                .ok_or_else(|| Error::StructureMismatch(format!("unknown parameter `{name}`")))?;
            if p.var.as_tensor().shape() != value.shape() {
                return Err(Error::StructureMismatch(format!(
                    "`{name}` has shape {:?}, value has {:?}",
                    p.var.as_tensor().shape(),
                    value.shape()
                )));
            }
            p.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies every parameter of `self` whose name starts with `prefix` from `source`.
    pub fn copy_from(&self, source: &ParamStore, prefix: &str) -> Result<()> {
        for p in self.with_prefix(prefix) {
            let src = source.get(p.name()).ok_or_else(|| {
                Error::StructureMismatch(format!("source lacks parameter `{}`", p.name()))
            })?;
            let value = src.var.as_tensor().to_dtype(self.dtype)?.copy()?;
            p.set(&value)?;
        }
        Ok(())
    }

    /// SHA-256 over the names and raw little-endian values of selected parameters.
    pub fn digest(&self, filter: impl Fn(&Param) -> bool) -> Result<String> {
        let mut hasher = Sha256::new();
        for p in self.all().iter().filter(|p| filter(p)) {
            hasher.update(p.name().as_bytes());
            for v in p.to_vec()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

pub(crate) fn has_prefix(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Partition of a store's weights into frozen and trainable names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
}

impl FreezeMask {
    /// Freezes every weight under any of `prefixes`.
    pub fn from_prefixes(store: &ParamStore, prefixes: &[String]) -> Self {
        let mut mask = FreezeMask::default();
        for p in store.weights() {
            if prefixes.iter().any(|pre| has_prefix(p.name(), pre)) {
                mask.frozen.insert(p.name().to_string());
            } else {
                mask.trainable.insert(p.name().to_string());
            }
        }
        mask
    }

    pub fn frozen_fraction(&self) -> f64 {
        let total = self.frozen.len() + self.trainable.len();
        if total == 0 {
            0.0
        } else {
            self.frozen.len() as f64 / total as f64
        }
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal { std: f64 },
    /// Normal truncated to two standard deviations.
    TruncNormal { std: f64 },
    Uniform { bound: f64 },
}

/// Hierarchical parameter constructor with a shared seeded generator.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
    rng: Rc<RefCell<ChaCha8Rng>>,
}

impl ParamBuilder {
    pub fn new(store: &ParamStore, seed: u64) -> Self {
        Self {
            store: store.clone(),
            prefix: String::new(),
            rng: Rc::new(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            store: self.store.clone(),
            prefix,
            rng: self.rng.clone(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn values(&self, n: usize, init: Init) -> Vec<f64> {
        let mut rng = self.rng.borrow_mut();
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    std * z
                })
                .collect(),
            Init::TruncNormal { std } => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    if z.abs() <= 2.0 {
                        break std * z;
                    }
                })
                .collect(),
            Init::Uniform { bound } => (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    fn create(&self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> Result<Param> {
        let n = shape.iter().product();
        let values = self.values(n, init);
        let t = Tensor::from_vec(values, shape, &self.store.device)?;
        self.store.insert(&self.pp(name).prefix, t, kind)
    }

    pub fn weight(&self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        self.create(name, shape, init, ParamKind::Weight)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        self.create(name, shape, init, ParamKind::Buffer)
    }
}

/// Values of all parameters keyed by name.
pub fn values_by_name(store: &ParamStore) -> Result<BTreeMap<String, Vec<f64>>> {
    store
        .all()
        .iter()
        .map(|p| Ok((p.name().to_string(), p.to_vec()?)))
        .collect()
}
