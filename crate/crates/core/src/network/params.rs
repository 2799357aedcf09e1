use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Const(f64),
    /// Zero-mean normal with std `sqrt(gain / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

/// Named trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Names are kept sorted so iteration order, and therefore
/// initialisation and serialisation, is reproducible.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn make(&mut self, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::FanIn { fan_in, gain } => {
                let std = (gain / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let v = self.make(shape, init)?;
        self.params.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        let v = self.make(shape, init)?;
        self.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite one parameter or buffer in place, checking its shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: expected shape {:?}, found {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}
