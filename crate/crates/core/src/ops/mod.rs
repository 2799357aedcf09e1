//! Tensor kernels the network needs beyond what `candle_core` ships with a
//! fast or correct CPU backward: dilated convolution, batch normalisation,
//! max pooling and bilinear resampling.

mod batchnorm;
mod conv;
mod pool;
mod resample;

use std::sync::{Arc, Mutex};

use candle_core::{Layout, Tensor, D};

pub use batchnorm::BatchStats;

pub(crate) trait Element: Copy + Send + Sync + 'static + std::ops::AddAssign + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> {
    fn zero() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `C = A·B` (or `C += A·B` when `accumulate`), with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
        accumulate: bool,
    );
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn zero() -> Self {
                0.0
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c.fill(0.0);
                    }
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every caller sizes a, b and c for the given dims and strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

pub(crate) fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("expected a contiguous tensor, got {layout:?}"),
    }
}

/// Stride-1 convolution with symmetric zero padding and dilation.
/// `x`: (B, Cin, H, W), `weight`: (Cout, Cin, k, k).
pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, dilation: usize) -> candle_core::Result<Tensor> {
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    x.apply_op2(&weight, conv::Conv2d { padding, dilation })
}

/// Batch normalisation with batch statistics over (B, H, W). The statistics
/// of this call are written to `stats`.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    stats: &Arc<Mutex<BatchStats>>,
) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(
        &gamma.contiguous()?,
        &beta.contiguous()?,
        batchnorm::BatchNormTrain {
            eps,
            stats: Arc::clone(stats),
        },
    )
}

/// Bilinear resize of a (B, C, H, W) tensor with half-pixel centres
/// (`align_corners = false`).
/// 2x2 stride-2 max pooling; the gradient goes to each window's maximum.
pub fn max_pool2(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(pool::MaxPool2)
}

pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    x.contiguous()?.apply_op1(resample::Bilinear { out_h, out_w })
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Bilinear resize of `planes` row-major (h, w) planes, same convention as
/// [`upsample_bilinear`].
pub fn resize_planes_bilinear(data: &[f32], planes: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return data.to_vec();
    }
    resample::resize(data, planes, h, w, out_h, out_w)
}
