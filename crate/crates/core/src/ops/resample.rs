use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use super::{contiguous_slice, Element};

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - l,
                w1: l,
            }
        })
        .collect()
}

pub(crate) fn resize<T: Element>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (row, t) in src.chunks_exact(w).zip(tmp.chunks_exact_mut(ow)) {
            for (o, b) in t.iter_mut().zip(&tx) {
                *o = T::from_f64(b.w0) * row[b.i0] + T::from_f64(b.w1) * row[b.i1];
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (d, a) in dst.chunks_exact_mut(ow).zip(&ty) {
            let r0 = &tmp[a.i0 * ow..(a.i0 + 1) * ow];
            let r1 = &tmp[a.i1 * ow..(a.i1 + 1) * ow];
            let (wy0, wy1) = (T::from_f64(a.w0), T::from_f64(a.w1));
            for ((o, &v0), &v1) in d.iter_mut().zip(r0).zip(r1) {
                *o = wy0 * v0 + wy1 * v1;
            }
        }
    }
    out
}

fn backward<T: Element>(g: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        tmp.iter_mut().for_each(|v| *v = T::zero());
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        for (row, a) in src.chunks_exact(ow).zip(&ty) {
            let (wy0, wy1) = (T::from_f64(a.w0), T::from_f64(a.w1));
            for (t, &v) in tmp[a.i0 * ow..(a.i0 + 1) * ow].iter_mut().zip(row) {
                *t += wy0 * v;
            }
            for (t, &v) in tmp[a.i1 * ow..(a.i1 + 1) * ow].iter_mut().zip(row) {
                *t += wy1 * v;
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (d, t) in dst.chunks_exact_mut(w).zip(tmp.chunks_exact(ow)) {
            for (&v, b) in t.iter().zip(&tx) {
                d[b.i0] += T::from_f64(b.w0) * v;
                d[b.i1] += T::from_f64(b.w1) * v;
            }
        }
    }
    dx
}

pub(crate) struct Bilinear {
    pub out_h: usize,
    pub out_w: usize,
}

impl CustomOp1 for Bilinear {
    fn name(&self) -> &'static str {
        "dbf-bilinear"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let (oh, ow) = (self.out_h, self.out_w);
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(resize(contiguous_slice(x, l)?, b * c, h, w, oh, ow)),
            CpuStorage::F64(x) => CpuStorage::F64(resize(contiguous_slice(x, l)?, b * c, h, w, oh, ow)),
            _ => candle_core::bail!("bilinear: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, oh, ow))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let g = grad.contiguous()?.apply_op1_no_bwd(&BilinearGrad { in_h: h, in_w: w })?;
        Ok(Some(g))
    }
}

struct BilinearGrad {
    in_h: usize,
    in_w: usize,
}

impl CustomOp1 for BilinearGrad {
    fn name(&self) -> &'static str {
        "dbf-bilinear-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, oh, ow) = l.shape().dims4()?;
        let (h, w) = (self.in_h, self.in_w);
        let out = match s {
            CpuStorage::F32(g) => CpuStorage::F32(backward(contiguous_slice(g, l)?, b * c, h, w, oh, ow)),
            CpuStorage::F64(g) => CpuStorage::F64(backward(contiguous_slice(g, l)?, b * c, h, w, oh, ow)),
            _ => candle_core::bail!("bilinear grad: unsupported dtype"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_preserved() {
        let x = vec![3.0f64; 2 * 4 * 4];
        let y = resize(&x, 2, 4, 4, 32, 16);
        assert!(y.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn two_x_upsample_matches_half_pixel_convention() {
        // [0, 1] -> [0, 0.25, 0.75, 1] under align_corners = false.
        let y = resize(&[0.0f64, 1.0], 1, 1, 2, 1, 4);
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..48).map(|i| (i as f64 * 0.91).cos()).collect();
        let y = resize(&x, 1, 3, 4, 6, 8);
        let dx = backward(&g, 1, 3, 4, 6, 8);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
