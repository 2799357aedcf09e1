//! The dual-branch body/boundary fusion network.
//!
//! Layout: a five-block dilated encoder (E1..E5, stride 1..16), an ASP_OC
//! context block on E5, then up to two FFS decoder blocks. FFS-2 merges E2
//! with the context features upsampled 8x; FFS-1 merges E1 with the FFS-2
//! output upsampled 2x. A 1x1 head on the FFS-1 output produces the final
//! logits. With no FFS block the head runs on the context features and its
//! output is upsampled 16x.

mod asp_oc;
mod encoder;
mod ffs;
mod layers;
mod params;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use asp_oc::{AspOc, AspOcConfig};
pub use encoder::{Encoder, EncoderBlockSpec, EncoderSpec};
pub use ffs::{fuse, Ffm, Ffs, FfsOutput};
pub use layers::{BatchNorm, Conv2d, ConvBnRelu};
pub use params::{Init, ParamStore};

use crate::error::{Error, Result};
use crate::ops;
use ffs::FfsSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FfsConfig {
    /// Number of FFS decoder blocks, 0 (baseline), 1 or 2.
    pub count: usize,
    pub use_ffm: bool,
    pub lambda_init: f64,
    pub supervise_body: bool,
    pub supervise_bound: bool,
    /// Branch widths of FFS-1 and FFS-2.
    pub widths: [usize; 2],
    pub ffm_kernel: usize,
}

impl Default for FfsConfig {
    fn default() -> Self {
        Self {
            count: 2,
            use_ffm: true,
            lambda_init: 1.0,
            supervise_body: true,
            supervise_bound: true,
            widths: [32, 64],
            ffm_kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub asp_oc: AspOcConfig,
    pub ffs: FfsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::default(),
            asp_oc: AspOcConfig::default(),
            ffs: FfsConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Same topology with every channel width divided by `divisor` (min 1).
    pub fn slimmed(&self, divisor: usize) -> Self {
        let d = |c: usize| (c / divisor.max(1)).max(1);
        let mut out = self.clone();
        for b in &mut out.encoder.blocks {
            if b.in_channels != 3 {
                b.in_channels = d(b.in_channels);
            }
            b.out_channels = d(b.out_channels);
        }
        out.asp_oc.branch_channels = d(out.asp_oc.branch_channels).max(out.asp_oc.key_reduction);
        out.asp_oc.out_channels = d(out.asp_oc.out_channels);
        out.ffs.widths = [d(out.ffs.widths[0]), d(out.ffs.widths[1])];
        out
    }

    /// Every width set to `channels`; used for gradient checks.
    pub fn toy(channels: usize) -> Self {
        let mut out = Self::default();
        for (i, b) in out.encoder.blocks.iter_mut().enumerate() {
            b.in_channels = if i == 0 { 3 } else { channels };
            b.out_channels = channels;
        }
        out.asp_oc.branch_channels = channels;
        out.asp_oc.out_channels = channels;
        out.ffs.widths = [channels, channels];
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.asp_oc.validate()?;
        let f = &self.ffs;
        if f.count > 2 {
            return Err(Error::Config(format!("FFS count must be 0, 1 or 2, got {}", f.count)));
        }
        if !f.lambda_init.is_finite() {
            return Err(Error::Config("lambda_init must be finite".into()));
        }
        if f.widths.contains(&0) || f.ffm_kernel % 2 == 0 {
            return Err(Error::Config("FFS widths must be positive and the FFM kernel odd".into()));
        }
        Ok(())
    }
}

/// Deep-supervision logits of one FFS block.
pub struct Supervision {
    /// 1 for FFS-1 (full resolution), 2 for FFS-2 (half resolution).
    pub level: usize,
    pub body_logits: Option<Tensor>,
    pub bound_logits: Option<Tensor>,
}

pub struct ForwardOutputs {
    /// (B, 1, H, W) logits at input resolution.
    pub final_logits: Tensor,
    /// One entry per active FFS block, ordered FFS-1 then FFS-2.
    pub supervision: Vec<Supervision>,
    /// Lambda of each active FFS block, ordered FFS-1 then FFS-2.
    pub lambda_values: Vec<f64>,
}

pub struct DbfNet {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    asp_oc: AspOc,
    ffs1: Option<Ffs>,
    ffs2: Option<Ffs>,
    head: Conv2d,
}

impl DbfNet {
    pub fn new(config: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let encoder = Encoder::new(&mut store, &config.encoder)?;
        let e5 = config.encoder.channels(4);
        let asp_oc = AspOc::new(&mut store, e5, &config.asp_oc)?;
        let ctx = config.asp_oc.out_channels;
        let f = &config.ffs;
        let settings = |in_channels: usize, width: usize| FfsSettings {
            in_channels,
            width,
            use_ffm: f.use_ffm,
            ffm_kernel: f.ffm_kernel,
            lambda_init: f.lambda_init,
            body_head: f.supervise_body,
            bound_head: f.supervise_bound,
        };
        let (ffs1, ffs2, head_in) = match f.count {
            0 => (None, None, ctx),
            1 => {
                let s1 = settings(config.encoder.channels(0) + ctx, f.widths[0]);
                (Some(Ffs::new(&mut store, "ffs1", &s1)?), None, f.widths[0])
            }
            _ => {
                let s2 = settings(config.encoder.channels(1) + ctx, f.widths[1]);
                let ffs2 = Ffs::new(&mut store, "ffs2", &s2)?;
                let s1 = settings(config.encoder.channels(0) + f.widths[1], f.widths[0]);
                let ffs1 = Ffs::new(&mut store, "ffs1", &s1)?;
                (Some(ffs1), Some(ffs2), f.widths[0])
            }
        };
        let head = Conv2d::new(&mut store, "head", head_in, 1, 1, 1, true)?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            asp_oc,
            ffs1,
            ffs2,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn encode(&self, image: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        self.encoder.forward(image, train)
    }

    pub fn context(&self, e5: &Tensor, train: bool) -> Result<Tensor> {
        self.asp_oc.forward(e5, train)
    }

    /// FFS block by level (1 or 2), if active.
    pub fn ffs(&self, level: usize) -> Option<&Ffs> {
        match level {
            1 => self.ffs1.as_ref(),
            2 => self.ffs2.as_ref(),
            _ => None,
        }
    }

    pub fn lambda_values(&self) -> Result<Vec<f64>> {
        [&self.ffs1, &self.ffs2]
            .into_iter()
            .flatten()
            .map(|f| f.lambda_value())
            .collect()
    }

    /// `train` selects batch statistics (and updates running statistics) in
    /// every batch-norm layer.
    pub fn forward(&self, image: &Tensor, train: bool) -> Result<ForwardOutputs> {
        let (_, _, h, w) = image.dims4().map_err(|_| {
            Error::Shape(format!("expected a 4-D image tensor, got {:?}", image.dims()))
        })?;
        let feats = self.encode(image, train)?;
        let ctx = self.context(&feats[4], train)?;
        let mut supervision = Vec::new();
        let final_logits = match (&self.ffs1, &self.ffs2) {
            (None, _) => {
                let logits = self.head.forward(&ctx)?;
                ops::upsample_bilinear(&logits, h, w)?
            }
            (Some(ffs1), None) => {
                let deep = ops::upsample_bilinear(&ctx, h, w)?;
                let o1 = ffs1.forward(&feats[0], &deep, train)?;
                supervision.push(Supervision {
                    level: 1,
                    body_logits: o1.body_logits,
                    bound_logits: o1.bound_logits,
                });
                self.head.forward(&o1.fused)?
            }
            (Some(ffs1), Some(ffs2)) => {
                let deep2 = ops::upsample_bilinear(&ctx, h / 2, w / 2)?;
                let o2 = ffs2.forward(&feats[1], &deep2, train)?;
                let deep1 = ops::upsample_bilinear(&o2.fused, h, w)?;
                let o1 = ffs1.forward(&feats[0], &deep1, train)?;
                supervision.push(Supervision {
                    level: 1,
                    body_logits: o1.body_logits,
                    bound_logits: o1.bound_logits,
                });
                supervision.push(Supervision {
                    level: 2,
                    body_logits: o2.body_logits,
                    bound_logits: o2.bound_logits,
                });
                self.head.forward(&o1.fused)?
            }
        };
        Ok(ForwardOutputs {
            final_logits,
            supervision,
            lambda_values: self.lambda_values()?,
        })
    }
}

/// Exact number of trainable scalars for `config`, lambdas included.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    Ok(DbfNet::new(config, DType::F32, 0)?.num_parameters())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn default_budget_in_window() {
        let n = count_parameters(&ModelConfig::default()).unwrap();
        assert!((2_700_000..=3_700_000).contains(&n), "{n}");
    }

    #[test]
    fn lambda_adds_one_scalar_per_block() {
        let mut cfg = ModelConfig::default();
        let two = count_parameters(&cfg).unwrap();
        let net = DbfNet::new(&cfg, DType::F32, 0).unwrap();
        let lambdas: usize = net
            .store()
            .params()
            .iter()
            .filter(|(k, _)| k.ends_with("lambda"))
            .map(|(_, v)| v.elem_count())
            .sum();
        assert_eq!(lambdas, 2);
        cfg.ffs.count = 0;
        assert!(count_parameters(&cfg).unwrap() < two);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = ModelConfig::default();
        cfg.ffs.count = 3;
        assert!(matches!(DbfNet::new(&cfg, DType::F32, 0), Err(Error::Config(_))));
        let mut cfg = ModelConfig::default();
        cfg.ffs.lambda_init = f64::NAN;
        assert!(DbfNet::new(&cfg, DType::F32, 0).is_err());
        let mut cfg = ModelConfig::default();
        cfg.encoder.blocks[2].in_channels = 7;
        assert!(DbfNet::new(&cfg, DType::F32, 0).is_err());
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let net = DbfNet::new(&ModelConfig::toy(4), DType::F32, 0).unwrap();
        let x = Tensor::zeros((1, 3, 40, 48), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x, false), Err(Error::Shape(_))));
    }
}
