use std::sync::{Arc, Mutex};

use candle_core::{DType, Tensor, Var};

use super::params::{Init, ParamStore};
use crate::error::Result;
use crate::ops::{self, BatchStats};

pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    padding: usize,
    dilation: usize,
}

impl Conv2d {
    /// Square `kernel`x`kernel` convolution with "same" padding for the given dilation.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.param(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::FanIn { fan_in, gain: 2.0 },
        )?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[c_out], Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, self.weight.as_tensor(), self.padding, self.dilation)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Spatial batch normalisation over (B, H, W) per channel.
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), &[channels], Init::Const(1.0))?,
            beta: store.param(&format!("{name}.beta"), &[channels], Init::Const(0.0))?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], Init::Const(0.0))?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Const(1.0))?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if train {
            let stats = Arc::new(Mutex::new(BatchStats::default()));
            let y = ops::batch_norm_train(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps, &stats)?;
            let s = stats.lock().expect("stats lock");
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let dev = x.device();
            let rm = self.running_mean.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let rv = self.running_var.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let rm: Vec<f64> = rm.iter().zip(&s.mean).map(|(r, v)| (1.0 - m) * r + m * v).collect();
            let rv: Vec<f64> = rv.iter().zip(&s.var).map(|(r, v)| (1.0 - m) * r + m * unbiased * v).collect();
            let dtype = self.running_mean.dtype();
            self.running_mean.set(&Tensor::from_vec(rm, c, dev)?.to_dtype(dtype)?)?;
            self.running_var.set(&Tensor::from_vec(rv, c, dev)?.to_dtype(dtype)?)?;
            return Ok(y);
        }
        let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
        let var = self.running_var.as_tensor().reshape((1, c, 1, 1))?;
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let scale = inv_std.broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?;
        let shift = self
            .beta
            .as_tensor()
            .reshape((1, c, 1, 1))?
            .broadcast_sub(&mean.broadcast_mul(&scale)?)?;
        Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// conv (no bias) -> batch norm -> ReLU.
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, kernel, dilation, false)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu()?)
    }
}
