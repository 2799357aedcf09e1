use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use super::{contiguous_slice, Element};

/// Index of the window maximum for every output cell; ties go to the first
/// element in row-major order.
fn argmax<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i].to_f64() > x[best].to_f64() {
                        best = i;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

fn dims(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub(crate) struct MaxPool2;

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "dbf-maxpool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims(l)?;
        fn run<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
            argmax(x, planes, h, w).into_iter().map(|i| x[i]).collect()
        }
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(run(contiguous_slice(x, l)?, b * c, h, w)),
            CpuStorage::F64(x) => CpuStorage::F64(run(contiguous_slice(x, l)?, b * c, h, w)),
            _ => candle_core::bail!("maxpool: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, h / 2, w / 2))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &MaxPool2Grad)?))
    }
}

/// arg1 = pooled input, arg2 = output gradient.
struct MaxPool2Grad;

impl CustomOp2 for MaxPool2Grad {
    fn name(&self) -> &'static str {
        "dbf-maxpool2-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims(l1)?;
        fn run<T: Element>(x: &[T], g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
            let mut dx = vec![T::zero(); x.len()];
            for (i, &v) in argmax(x, planes, h, w).into_iter().zip(g) {
                dx[i] = v;
            }
            dx
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(run(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, b * c, h, w))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(run(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, b * c, h, w))
            }
            _ => candle_core::bail!("maxpool grad: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Tensor, Var};

    #[test]
    fn forward_and_gradient_route_to_window_maximum() {
        let x = Var::from_tensor(
            &Tensor::new(&[[[[1.0f64, 5.0, 2.0, 0.0], [3.0, 4.0, 7.0, 1.0], [0.0, 0.0, 1.0, 1.0], [0.0, 2.0, 1.0, 1.0]]]], &Device::Cpu)
                .unwrap(),
        )
        .unwrap();
        let y = super::super::max_pool2(x.as_tensor()).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![5.0, 7.0, 2.0, 1.0]);
        let probe = Tensor::new(&[[[[10.0f64, 20.0], [30.0, 40.0]]]], &Device::Cpu).unwrap();
        let g = y.mul(&probe).unwrap().sum_all().unwrap().backward().unwrap();
        let dx = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expected = [0.0, 10.0, 0.0, 0.0, 0.0, 0.0, 20.0, 0.0, 0.0, 0.0, 40.0, 0.0, 0.0, 30.0, 0.0, 0.0];
        assert_eq!(dx, expected);
    }
}
