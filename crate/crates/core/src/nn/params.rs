//! Parameter storage with seed-determined initialization.
//!
//! Candle's CPU random generator cannot be seeded, so every variable is
//! initialized here from a ChaCha stream keyed by the store seed and the
//! variable's path. The resulting values depend only on `(seed, name, shape,
//! init)`, never on construction order.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

#[derive(Clone)]
pub struct ParamStore {
    varmap: VarMap,
    seed: u64,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self::with_dtype(seed, DType::F32)
    }

    pub fn with_dtype(seed: u64, dtype: DType) -> Self {
        Self {
            varmap: VarMap::new(),
            seed,
            dtype,
        }
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        let backend = SeededBackend {
            varmap: self.varmap.clone(),
            seed: self.seed,
        };
        VarBuilder::from_backend(Box::new(backend), self.dtype, Device::Cpu)
    }

    /// Variables ordered by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().unwrap();
        let sorted: BTreeMap<_, _> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        sorted.into_iter().collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    /// Variables whose path starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.named_vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.varmap.save(path)
    }

    /// Overwrites every already-declared variable with the stored value.
    pub fn load(&self, path: &Path) -> Result<()> {
        let mut varmap = self.varmap.clone();
        varmap.load(path)
    }

    /// Overwrites one declared variable.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let data = self.varmap.data().lock().unwrap();
        let var = data
            .get(name)
            .ok_or_else(|| candle_core::Error::Msg(format!("no variable named {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().unwrap().get(name).cloned()
    }

    /// Snapshot of every variable's current value.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        for (name, value) in snapshot {
            self.set(name, value)?;
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Copies values from another store for every shared name.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let theirs: BTreeMap<String, Var> = other.named_vars().into_iter().collect();
        for (name, var) in self.named_vars() {
            if let Some(src) = theirs.get(&name) {
                var.set(src.as_tensor())?;
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.named_vars() {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values: Vec<f64> = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

struct SeededBackend {
    varmap: VarMap,
    seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn init_values(init: Init, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    match init {
        Init::Const(v) => vec![v; n],
        Init::Randn { mean, stdev } => {
            let dist = Normal::new(mean, stdev.max(f64::MIN_POSITIVE)).expect("finite normal");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Uniform { lo, up } => {
            if up <= lo {
                return vec![lo; n];
            }
            let dist = Uniform::new(lo, up).expect("valid range");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let fan = fan.for_shape(shape).max(1);
            let std = non_linearity.gain() / (fan as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    init_values(Init::Uniform { lo: -bound, up: bound }, shape, rng)
                }
                NormalOrUniform::Normal => init_values(Init::Randn { mean: 0.0, stdev: std }, shape, rng),
            }
        }
    }
}

impl SimpleBackend for SeededBackend {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        let mut data = self.varmap.data().lock().unwrap();
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch on {name}: {s:?} <> {:?}", var.shape());
            }
            return Ok(var.as_tensor().clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values = init_values(h, &s, &mut rng);
        let tensor = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> Result<Tensor> {
        let data = self.varmap.data().lock().unwrap();
        match data.get(name) {
            Some(var) => var.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("cannot find tensor {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().unwrap().contains_key(name)
    }
}
