//! Feature fusion and supervision block.
//!
//! The concatenated skip/deep features feed two parallel conv branches that
//! pre-generate body and boundary features. An optional fusion module lets
//! each stream add a convolution of the other, and the block output is
//! `lambda * body + bound` with a trainable `lambda`.

use candle_core::{Tensor, Var};

use super::layers::{Conv2d, ConvBnRelu};
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

/// Bidirectional residual cross-convolution between the body and boundary
/// streams: `body* = body + conv_a(bound)`, `bound* = bound + conv_b(body)`.
pub struct Ffm {
    pub from_bound: Conv2d,
    pub from_body: Conv2d,
}

impl Ffm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            from_bound: Conv2d::new(store, &format!("{name}.from_bound"), channels, channels, kernel, 1, true)?,
            from_body: Conv2d::new(store, &format!("{name}.from_body"), channels, channels, kernel, 1, true)?,
        })
    }

    pub fn forward(&self, f_body: &Tensor, f_bound: &Tensor) -> Result<(Tensor, Tensor)> {
        if f_body.dims() != f_bound.dims() {
            return Err(Error::Shape(format!(
                "fusion inputs differ: body {:?} vs bound {:?}",
                f_body.dims(),
                f_bound.dims()
            )));
        }
        let body = (f_body + self.from_bound.forward(f_bound)?)?;
        let bound = (f_bound + self.from_body.forward(f_body)?)?;
        Ok((body, bound))
    }
}

/// `lambda * body + bound`, with `lambda` a scalar tensor of shape (1,).
pub fn fuse(lambda: &Tensor, body: &Tensor, bound: &Tensor) -> Result<Tensor> {
    let l = lambda.reshape((1, 1, 1, 1))?;
    Ok(body.broadcast_mul(&l)?.add(bound)?)
}

pub struct FfsOutput {
    pub fused: Tensor,
    pub body_star: Tensor,
    pub bound_star: Tensor,
    pub body_logits: Option<Tensor>,
    pub bound_logits: Option<Tensor>,
}

pub struct Ffs {
    body_branch: [ConvBnRelu; 2],
    bound_branch: [ConvBnRelu; 2],
    pub ffm: Option<Ffm>,
    body_head: Option<Conv2d>,
    bound_head: Option<Conv2d>,
    pub lambda: Var,
}

pub struct FfsSettings {
    pub in_channels: usize,
    pub width: usize,
    pub use_ffm: bool,
    pub ffm_kernel: usize,
    pub lambda_init: f64,
    pub body_head: bool,
    pub bound_head: bool,
}

impl Ffs {
    pub fn new(store: &mut ParamStore, name: &str, s: &FfsSettings) -> Result<Self> {
        let branch = |store: &mut ParamStore, tag: &str| -> Result<[ConvBnRelu; 2]> {
            Ok([
                ConvBnRelu::new(store, &format!("{name}.{tag}.0"), s.in_channels, s.width, 3, 1)?,
                ConvBnRelu::new(store, &format!("{name}.{tag}.1"), s.width, s.width, 3, 1)?,
            ])
        };
        let body_branch = branch(store, "body")?;
        let bound_branch = branch(store, "bound")?;
        let ffm = if s.use_ffm {
            Some(Ffm::new(store, &format!("{name}.ffm"), s.width, s.ffm_kernel)?)
        } else {
            None
        };
        let head = |store: &mut ParamStore, on: bool, tag: &str| -> Result<Option<Conv2d>> {
            if on {
                Ok(Some(Conv2d::new(store, &format!("{name}.{tag}_head"), s.width, 1, 1, 1, true)?))
            } else {
                Ok(None)
            }
        };
        let body_head = head(store, s.body_head, "body")?;
        let bound_head = head(store, s.bound_head, "bound")?;
        let lambda = store.param(&format!("{name}.lambda"), &[1], Init::Const(s.lambda_init))?;
        Ok(Self {
            body_branch,
            bound_branch,
            ffm,
            body_head,
            bound_head,
            lambda,
        })
    }

    /// `deep` must already be resampled to the spatial size of `skip`.
    pub fn forward(&self, skip: &Tensor, deep: &Tensor, train: bool) -> Result<FfsOutput> {
        let (s, d) = (skip.dims(), deep.dims());
        if s.len() != 4 || d.len() != 4 || s[0] != d[0] || s[2..] != d[2..] {
            return Err(Error::Shape(format!(
                "skip {s:?} and deep {d:?} features must share batch and spatial size"
            )));
        }
        let f = Tensor::cat(&[skip, deep], 1)?;
        let f_body = self.body_branch[1].forward(&self.body_branch[0].forward(&f, train)?, train)?;
        let f_bound = self.bound_branch[1].forward(&self.bound_branch[0].forward(&f, train)?, train)?;
        let (body_star, bound_star) = match &self.ffm {
            Some(ffm) => ffm.forward(&f_body, &f_bound)?,
            None => (f_body, f_bound),
        };
        let fused = fuse(self.lambda.as_tensor(), &body_star, &bound_star)?;
        let body_logits = self.body_head.as_ref().map(|h| h.forward(&body_star)).transpose()?;
        let bound_logits = self.bound_head.as_ref().map(|h| h.forward(&bound_star)).transpose()?;
        Ok(FfsOutput {
            fused,
            body_star,
            bound_star,
            body_logits,
            bound_logits,
        })
    }

    pub fn lambda_value(&self) -> Result<f64> {
        Ok(self.lambda.as_tensor().to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
    }
}
