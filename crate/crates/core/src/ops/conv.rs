//! Stride-1 dilated 2-D convolution as an im2col + GEMM custom op, with
//! GEMM-based gradients for both the input and the kernel.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

use super::{contiguous_slice, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.padding - self.dilation * (self.k - 1)
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.padding - self.dilation * (self.k - 1)
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.padding == 0
    }
}

fn im2col<T: Element>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let pad = g.padding as isize;
    let mut row = 0;
    for ci in 0..g.c_in {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut col[row * plane..(row + 1) * plane];
                let off_y = (ky * g.dilation) as isize - pad;
                let off_x = (kx * g.dilation) as isize - pad;
                let x_lo = (-off_x).clamp(0, ow as isize) as usize;
                let x_hi = (g.w as isize - off_x).clamp(0, ow as isize) as usize;
                for oy in 0..oh {
                    let iy = oy as isize + off_y;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize || x_lo >= x_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    out_row[..x_lo].fill(T::zero());
                    out_row[x_hi..].fill(T::zero());
                    let base = iy as usize * g.w;
                    let s0 = (x_lo as isize + off_x) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&src[base + s0..base + s0 + (x_hi - x_lo)]);
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let pad = g.padding as isize;
    let mut row = 0;
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &col[row * plane..(row + 1) * plane];
                let off_y = (ky * g.dilation) as isize - pad;
                let off_x = (kx * g.dilation) as isize - pad;
                let x_lo = (-off_x).clamp(0, ow as isize) as usize;
                let x_hi = (g.w as isize - off_x).clamp(0, ow as isize) as usize;
                for oy in 0..oh {
                    let iy = oy as isize + off_y;
                    if iy < 0 || iy >= g.h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    let s0 = (x_lo as isize + off_x) as usize;
                    let d = &mut dst[base + s0..base + s0 + (x_hi - x_lo)];
                    for (a, b) in d.iter_mut().zip(&src[oy * ow + x_lo..oy * ow + x_hi]) {
                        *a += *b;
                    }
                }
                row += 1;
            }
        }
    }
}

fn forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let mut y = vec![T::zero(); g.batch * g.c_out * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        let cb: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        let yb = &mut y[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        // y_b[c_out, p] = sum_r w[c_out, r] * col[r, p]
        T::gemm(
            g.c_out, rows, plane, w, rows as isize, 1, cb, plane as isize, 1, yb, plane as isize,
            1, false,
        );
    }
    y
}

fn grad_input<T: Element>(g: &ConvGeometry, dy: &[T], w: &[T]) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let in_sz = g.c_in * g.h * g.w;
    let mut dx = vec![T::zero(); g.batch * in_sz];
    let mut dcol = vec![T::zero(); rows * plane];
    for b in 0..g.batch {
        let dyb = &dy[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
        if g.is_pointwise() {
            T::gemm(
                rows, g.c_out, plane, w, 1, rows as isize, dyb, plane as isize, 1, dxb,
                plane as isize, 1, false,
            );
        } else {
            // dcol[r, p] = sum_o w[o, r] * dy[o, p]
            T::gemm(
                rows, g.c_out, plane, w, 1, rows as isize, dyb, plane as isize, 1, &mut dcol,
                plane as isize, 1, false,
            );
            col2im_add(g, &dcol, dxb);
        }
    }
    dx
}

fn grad_weight<T: Element>(g: &ConvGeometry, x: &[T], dy: &[T]) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let mut dw = vec![T::zero(); g.c_out * rows];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        let cb: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        let dyb = &dy[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        // dw[o, r] += sum_p dy[o, p] * col[r, p]
        T::gemm(
            g.c_out, plane, rows, dyb, plane as isize, 1, cb, 1, plane as isize, &mut dw,
            rows as isize, 1, b > 0,
        );
    }
    dw
}

/// Forward convolution; arg1 = input (B, Cin, H, W), arg2 = kernel (Cout, Cin, k, k).
pub(crate) struct Conv2d {
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    fn geometry(&self, x: &Layout, w: &Layout) -> candle_core::Result<ConvGeometry> {
        let (batch, c_in, h, wd) = x.shape().dims4()?;
        let (c_out, c_in2, k, k2) = w.shape().dims4()?;
        if c_in != c_in2 || k != k2 {
            candle_core::bail!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                x.shape(),
                w.shape()
            );
        }
        let g = ConvGeometry {
            batch,
            c_in,
            c_out,
            h,
            w: wd,
            k,
            padding: self.padding,
            dilation: self.dilation,
        };
        if h + 2 * self.padding < self.dilation * (k - 1) + 1
            || wd + 2 * self.padding < self.dilation * (k - 1) + 1
        {
            candle_core::bail!("conv2d: kernel extent exceeds padded input");
        }
        Ok(g)
    }
}

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "dbf-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry(l1, l2)?;
        let shape = Shape::from((g.batch, g.c_out, g.out_h(), g.out_w()));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(forward(&g, contiguous_slice(x, l1)?, contiguous_slice(w, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(forward(&g, contiguous_slice(x, l1)?, contiguous_slice(w, l2)?))
            }
            _ => candle_core::bail!("conv2d: unsupported dtype pair"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = self.geometry(x.layout(), w.layout())?;
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(w, &GradInput { geometry: g })?;
        let dw = x.apply_op2_no_bwd(&grad, &GradWeight { geometry: g })?;
        Ok((Some(dx), Some(dw)))
    }
}

/// arg1 = output gradient, arg2 = kernel.
struct GradInput {
    geometry: ConvGeometry,
}

impl CustomOp2 for GradInput {
    fn name(&self) -> &'static str {
        "dbf-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.geometry;
        let shape = Shape::from((g.batch, g.c_in, g.h, g.w));
        let out = match (s1, s2) {
            (CpuStorage::F32(dy), CpuStorage::F32(w)) => {
                CpuStorage::F32(grad_input(g, contiguous_slice(dy, l1)?, contiguous_slice(w, l2)?))
            }
            (CpuStorage::F64(dy), CpuStorage::F64(w)) => {
                CpuStorage::F64(grad_input(g, contiguous_slice(dy, l1)?, contiguous_slice(w, l2)?))
            }
            _ => candle_core::bail!("conv2d grad: unsupported dtype pair"),
        };
        Ok((out, shape))
    }
}

/// arg1 = forward input, arg2 = output gradient.
struct GradWeight {
    geometry: ConvGeometry,
}

impl CustomOp2 for GradWeight {
    fn name(&self) -> &'static str {
        "dbf-conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.geometry;
        let shape = Shape::from((g.c_out, g.c_in, g.k, g.k));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(dy)) => {
                CpuStorage::F32(grad_weight(g, contiguous_slice(x, l1)?, contiguous_slice(dy, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(dy)) => {
                CpuStorage::F64(grad_weight(g, contiguous_slice(x, l1)?, contiguous_slice(dy, l2)?))
            }
            _ => candle_core::bail!("conv2d grad: unsupported dtype pair"),
        };
        Ok((out, shape))
    }
}
