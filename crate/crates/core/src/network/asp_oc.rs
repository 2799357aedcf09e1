//! Multi-scale context block: one object-context (spatial self-attention)
//! branch and four dilated 3x3 branches, concatenated and projected.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::ConvBnRelu;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::ops;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspOcConfig {
    /// Width of each of the five parallel branches.
    pub branch_channels: usize,
    /// Width after the 1x1 projection of the concatenated branches.
    pub out_channels: usize,
    /// Dilation rates of the four 3x3 branches.
    pub rates: Vec<usize>,
    /// Query/key width is `branch_channels / key_reduction`.
    pub key_reduction: usize,
}

impl Default for AspOcConfig {
    fn default() -> Self {
        Self {
            branch_channels: 24,
            out_channels: 256,
            rates: vec![1, 12, 24, 36],
            key_reduction: 2,
        }
    }
}

impl AspOcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rates.len() != 4 || self.rates.contains(&0) {
            return Err(Error::Config(format!(
                "ASP_OC needs four positive dilation rates, got {:?}",
                self.rates
            )));
        }
        if self.branch_channels == 0 || self.out_channels == 0 || self.key_reduction == 0 {
            return Err(Error::Config("ASP_OC widths must be positive".into()));
        }
        if self.branch_channels / self.key_reduction == 0 {
            return Err(Error::Config("ASP_OC key width rounds to zero".into()));
        }
        Ok(())
    }
}

/// Dot-product self-attention over spatial positions.
struct ObjectContext {
    reduce: ConvBnRelu,
    query: ConvBnRelu,
    key: ConvBnRelu,
    out: ConvBnRelu,
    key_channels: usize,
}

impl ObjectContext {
    fn new(store: &mut ParamStore, c_in: usize, cfg: &AspOcConfig) -> Result<Self> {
        let c = cfg.branch_channels;
        let kc = c / cfg.key_reduction;
        Ok(Self {
            reduce: ConvBnRelu::new(store, "asp_oc.context.reduce", c_in, c, 1, 1)?,
            query: ConvBnRelu::new(store, "asp_oc.context.query", c, kc, 1, 1)?,
            key: ConvBnRelu::new(store, "asp_oc.context.key", c, kc, 1, 1)?,
            out: ConvBnRelu::new(store, "asp_oc.context.out", c, c, 1, 1)?,
            key_channels: kc,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let feats = self.reduce.forward(x, train)?;
        let (b, c, h, w) = feats.dims4()?;
        let n = h * w;
        let q = self.query.forward(&feats, train)?.reshape((b, self.key_channels, n))?;
        let k = self.key.forward(&feats, train)?.reshape((b, self.key_channels, n))?;
        let v = feats.reshape((b, c, n))?;
        // sim[b, i, j] = <q_i, k_j> / sqrt(kc)
        let sim = (q.transpose(1, 2)?.contiguous()?.matmul(&k)? / (self.key_channels as f64).sqrt())?;
        let attn = ops::softmax_last(&sim)?;
        // ctx[b, c, i] = sum_j v[b, c, j] attn[b, i, j]
        let ctx = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?;
        self.out.forward(&ctx.reshape((b, c, h, w))?, train)
    }
}

pub struct AspOc {
    context: ObjectContext,
    dilated: Vec<ConvBnRelu>,
    project: ConvBnRelu,
}

impl AspOc {
    pub fn new(store: &mut ParamStore, c_in: usize, cfg: &AspOcConfig) -> Result<Self> {
        cfg.validate()?;
        let dilated = cfg
            .rates
            .iter()
            .enumerate()
            .map(|(i, &r)| ConvBnRelu::new(store, &format!("asp_oc.dilated.{i}"), c_in, cfg.branch_channels, 3, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            context: ObjectContext::new(store, c_in, cfg)?,
            dilated,
            project: ConvBnRelu::new(store, "asp_oc.project", 5 * cfg.branch_channels, cfg.out_channels, 1, 1)?,
        })
    }

    pub fn forward(&self, e5: &Tensor, train: bool) -> Result<Tensor> {
        let mut branches = Vec::with_capacity(5);
        branches.push(self.context.forward(e5, train)?);
        for conv in &self.dilated {
            branches.push(conv.forward(e5, train)?);
        }
        let cat = Tensor::cat(&branches, 1)?;
        self.project.forward(&cat, train)
    }
}
