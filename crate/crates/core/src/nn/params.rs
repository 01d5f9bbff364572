use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Initialisation schemes for a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    Uniform { bound: f64 },
    /// Square matrix `I + N(0, std)`.
    NearIdentity { std: f64 },
}

/// Named trainable variables, ordered by name so iteration (and therefore
/// checkpoint layout and optimizer updates) is deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Start a named scope whose random draws come from a stream derived from
    /// `(seed, scope)`. Modules built from different scopes never perturb each
    /// other's initialisation.
    pub fn builder(&mut self, scope: &str, seed: u64) -> ParamBuilder<'_> {
        self.rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, scope));
        ParamBuilder {
            store: self,
            prefix: scope.to_string(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.vars.keys().filter(move |k| k.starts_with(prefix))
    }

    /// Overwrite the value of an existing variable (shape must match).
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(
                "ParamStore::assign",
                format!("{:?}", var.dims()),
                format!("{:?}", value.dims()),
            ));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// SplitMix64 finaliser over the seed mixed with an FNV-1a hash of the scope.
pub fn stream_seed(seed: u64, scope: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in scope.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(seed ^ h)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    /// Enter a sub-scope. Shares the parent's random stream.
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            prefix: format!("{}.{}", self.prefix, name),
            store: &mut *self.store,
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = format!("{}.{}", self.prefix, name);
        make_var(self.store, full, shape, init)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.store.rng
    }
}

fn make_var(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    init: Init,
) -> Result<Tensor> {
    if store.vars.contains_key(&name) {
        return Err(Error::Config(format!("duplicate parameter {name}")));
    }
    let n: usize = shape.iter().product();
    let rng = &mut store.rng;
    let values: Vec<f64> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Const(c) => vec![c; n],
        Init::Normal { std } => {
            let d = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        Init::NearIdentity { std } => {
            if shape.len() != 2 || shape[0] != shape[1] {
                return Err(Error::shape("near-identity init", "square matrix", format!("{shape:?}")));
            }
            let d = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let k = shape[0];
            (0..n)
                .map(|i| {
                    let eye = if i / k == i % k { 1.0 } else { 0.0 };
                    eye + d.sample(rng)
                })
                .collect()
        }
    };
    let t = Tensor::from_vec(values, shape, &store.device)?.to_dtype(store.dtype)?;
    let var = Var::from_tensor(&t)?;
    let out = var.as_tensor().clone();
    store.vars.insert(name, var);
    Ok(out)
}
