use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{Checkpoint, TensorBlob, DEVICE};
use crate::error::{ensure, Error, Result};

/// Named parameters with reproducible initialization.
///
/// candle's CPU backend cannot be seeded, so variables are created here from
/// a ChaCha stream in construction order instead of through `Init::var`.
#[derive(Clone)]
pub struct ParamStore {
    varmap: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
    dtype: DType,
}

struct SeededBackend {
    varmap: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl SeededBackend {
    fn init_values(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("rng lock");
        let normal = |rng: &mut ChaCha8Rng, mean: f64, sd: f64| -> Vec<f64> {
            (0..n)
                .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..up)).collect()
        };
        match init {
            Init::Const(v) => vec![v; n],
            Init::Randn { mean, stdev } => normal(&mut rng, mean, stdev),
            Init::Uniform { lo, up } => uniform(&mut rng, lo, up),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(&mut rng, -bound, bound)
                    }
                    NormalOrUniform::Normal => normal(&mut rng, 0.0, std),
                }
            }
        }
    }
}

impl SimpleBackend for SeededBackend {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().expect("varmap lock");
        if let Some(v) = data.get(name) {
            let t = v.as_tensor();
            if t.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", t.shape(), s);
            }
            return Ok(t.clone());
        }
        let values = self.init_values(&s, h);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let data = self.varmap.data().lock().expect("varmap lock");
        match data.get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().expect("varmap lock").contains_key(name)
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn builder(&self) -> VarBuilder<'static> {
        let backend = SeededBackend {
            varmap: self.varmap.clone(),
            rng: self.rng.clone(),
        };
        VarBuilder::from_backend(Box::new(backend), self.dtype, DEVICE)
    }

    /// All variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut out: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().expect("varmap lock").get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn to_blobs(&self) -> Result<BTreeMap<String, TensorBlob>> {
        self.named_vars()
            .into_iter()
            .map(|(name, var)| Ok((name, TensorBlob::from_tensor(var.as_tensor())?)))
            .collect()
    }

    /// Overwrites every variable from the checkpoint; names must match exactly.
    pub fn load_blobs(&self, blobs: &BTreeMap<String, TensorBlob>) -> Result<()> {
        let vars = self.named_vars();
        ensure!(
            vars.len() == blobs.len(),
            State,
            "checkpoint holds {} tensors, model expects {}",
            blobs.len(),
            vars.len()
        );
        for (name, var) in vars {
            let blob = blobs
                .get(&name)
                .ok_or_else(|| Error::state(format!("checkpoint lacks parameter {name}")))?;
            ensure!(
                blob.shape == var.dims(),
                State,
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                blob.shape,
                var.dims()
            );
            var.set(&blob.to_tensor()?.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        self.load_blobs(&ckpt.tensors)
    }

    /// SHA-256 of every parameter's little-endian bytes.
    pub fn digests(&self) -> Result<BTreeMap<String, String>> {
        self.named_vars()
            .into_iter()
            .map(|(n, v)| Ok((n, tensor_digest(v.as_tensor())?)))
            .collect()
    }

    /// Copies parameter values into a fresh store with identical names.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = Self::new(0, self.dtype);
        {
            let mut data = copy.varmap.data().lock().expect("varmap lock");
            for (name, var) in self.named_vars() {
                let t = var.as_tensor().copy()?;
                data.insert(name, Var::from_tensor(&t)?);
            }
        }
        Ok(copy)
    }
}

pub fn tensor_digest(t: &Tensor) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
    match t.dtype() {
        DType::F64 => {
            for v in t.flatten_all()?.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        _ => {
            for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    Ok(hex(&hasher.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::Module;

    #[test]
    fn same_seed_same_parameters() {
        let build = |seed| {
            let store = ParamStore::new(seed, DType::F32);
            let vb = store.builder();
            let lin = candle_nn::linear(4, 3, vb.pp("lin")).unwrap();
            let x = Tensor::ones((2, 4), DType::F32, &DEVICE).unwrap();
            let y: Vec<Vec<f32>> = lin.forward(&x).unwrap().to_vec2().unwrap();
            (store.digests().unwrap(), y)
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3).0, build(4).0);
    }

    #[test]
    fn deep_clone_is_independent() {
        let store = ParamStore::new(1, DType::F32);
        let _ = candle_nn::linear(2, 2, store.builder().pp("a")).unwrap();
        let copy = store.deep_clone().unwrap();
        assert_eq!(store.digests().unwrap(), copy.digests().unwrap());
        let v = copy.var("a.weight").unwrap();
        v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        assert_ne!(store.digests().unwrap(), copy.digests().unwrap());
    }
}
