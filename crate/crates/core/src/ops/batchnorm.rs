//! Training-mode batch normalisation as one fused op with an analytic
//! backward.

use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp3, Layout, Shape, Tensor};

use super::{contiguous_slice, Element};

/// Per-channel batch mean and biased variance of the last forward pass.
#[derive(Clone, Debug, Default)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn channel_stats<T: Element>(x: &[T], b: usize, c: usize, hw: usize) -> BatchStats {
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let planes = (0..b).map(|i| &x[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
        let s: f64 = planes.clone().map(|p| p.iter().map(|v| v.to_f64()).sum::<f64>()).sum();
        let m = s / n;
        let ss: f64 = planes
            .map(|p| p.iter().map(|v| (v.to_f64() - m) * (v.to_f64() - m)).sum::<f64>())
            .sum();
        mean[ch] = m;
        var[ch] = ss / n;
    }
    BatchStats { mean, var }
}

fn dims(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let (b, c, h, w) = l.shape().dims4()?;
    Ok((b, c, h * w))
}

fn forward<T: Element>(x: &[T], gamma: &[T], beta: &[T], b: usize, c: usize, hw: usize, eps: f64) -> (Vec<T>, BatchStats) {
    let stats = channel_stats(x, b, c, hw);
    let mut y = vec![T::zero(); x.len()];
    for ch in 0..c {
        let scale = gamma[ch].to_f64() / (stats.var[ch] + eps).sqrt();
        let shift = beta[ch].to_f64() - stats.mean[ch] * scale;
        let (scale, shift) = (T::from_f64(scale), T::from_f64(shift));
        for i in 0..b {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (o, &v) in y[r.clone()].iter_mut().zip(&x[r]) {
                *o = v * scale + shift;
            }
        }
    }
    (y, stats)
}

/// Returns `[dx..., dgamma..., dbeta...]` flattened.
fn backward<T: Element>(x: &[T], gamma: &[T], dy: &[T], b: usize, c: usize, hw: usize, eps: f64) -> Vec<T> {
    let n_x = x.len();
    let stats = channel_stats(x, b, c, hw);
    let n = (b * hw) as f64;
    let mut out = vec![T::zero(); n_x + 2 * c];
    for ch in 0..c {
        let mean = stats.mean[ch];
        let rstd = 1.0 / (stats.var[ch] + eps).sqrt();
        let (mut dbeta, mut dgamma) = (0.0, 0.0);
        for i in 0..b {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for (&g, &v) in dy[r.clone()].iter().zip(&x[r]) {
                let g = g.to_f64();
                dbeta += g;
                dgamma += g * (v.to_f64() - mean) * rstd;
            }
        }
        let k = gamma[ch].to_f64() * rstd / n;
        for i in 0..b {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for ((o, &g), &v) in out[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&x[r]) {
                let xhat = (v.to_f64() - mean) * rstd;
                *o = T::from_f64(k * (n * g.to_f64() - dbeta - xhat * dgamma));
            }
        }
        out[n_x + ch] = T::from_f64(dgamma);
        out[n_x + c + ch] = T::from_f64(dbeta);
    }
    out
}

/// arg1 = input (B, C, H, W), arg2 = gamma (C), arg3 = beta (C).
pub(crate) struct BatchNormTrain {
    pub eps: f64,
    pub stats: Arc<Mutex<BatchStats>>,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "dbf-batchnorm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, hw) = dims(l1)?;
        let (out, stats) = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(be)) => {
                let (y, s) = forward(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, contiguous_slice(be, l3)?, b, c, hw, self.eps);
                (CpuStorage::F32(y), s)
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(be)) => {
                let (y, s) = forward(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, contiguous_slice(be, l3)?, b, c, hw, self.eps);
                (CpuStorage::F64(y), s)
            }
            _ => candle_core::bail!("batchnorm: unsupported dtypes"),
        };
        *self.stats.lock().expect("stats lock") = stats;
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (_, c, _, _) = x.dims4()?;
        let n = x.elem_count();
        let flat = x.apply_op3_no_bwd(gamma, &grad.contiguous()?, &BatchNormGrad { eps: self.eps })?;
        let dx = flat.narrow(0, 0, n)?.reshape(x.shape())?;
        let dgamma = flat.narrow(0, n, c)?;
        let dbeta = flat.narrow(0, n + c, c)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// arg1 = input, arg2 = gamma, arg3 = output gradient.
struct BatchNormGrad {
    eps: f64,
}

impl CustomOp3 for BatchNormGrad {
    fn name(&self) -> &'static str {
        "dbf-batchnorm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, hw) = dims(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(dy)) => CpuStorage::F32(backward(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(dy, l3)?,
                b,
                c,
                hw,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(dy)) => CpuStorage::F64(backward(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(dy, l3)?,
                b,
                c,
                hw,
                self.eps,
            )),
            _ => candle_core::bail!("batchnorm grad: unsupported dtypes"),
        };
        Ok((out, Shape::from(l1.shape().elem_count() + 2 * c)))
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Tensor, Var};

    fn reference(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
        let c = g.dims1().unwrap();
        let n = (x.elem_count() / c) as f64;
        let mean = (x.sum_keepdim((0, 2, 3)).unwrap() / n).unwrap();
        let xc = x.broadcast_sub(&mean).unwrap();
        let var = (xc.sqr().unwrap().sum_keepdim((0, 2, 3)).unwrap() / n).unwrap();
        let xhat = xc.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap();
        xhat.broadcast_mul(&g.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn matches_composed_reference_and_gradients() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0.5f64, 2.0, (3, 4, 5, 6), &dev).unwrap()).unwrap();
        let g = Var::from_tensor(&Tensor::randn(1.0f64, 0.3, 4, &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0.0f64, 0.3, 4, &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (3, 4, 5, 6), &dev).unwrap();
        let stats = std::sync::Arc::new(std::sync::Mutex::new(super::BatchStats::default()));
        let fused = super::super::batch_norm_train(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5, &stats).unwrap();
        let refy = reference(x.as_tensor(), g.as_tensor(), b.as_tensor());
        let diff = (&fused - &refy).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");

        let gf = fused.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = refy.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            let a = gf.get(v.as_tensor()).unwrap();
            let r = gr.get(v.as_tensor()).unwrap();
            let d = (a - r).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-10, "{d}");
        }
        let s = stats.lock().unwrap();
        assert_eq!(s.mean.len(), 4);
    }
}
