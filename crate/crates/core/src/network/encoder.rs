use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::ConvBnRelu;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::ops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderBlockSpec {
    pub kernel_size: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Five dilated conv blocks; block `i` runs at 1/2^(i-1) of the input size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub blocks: Vec<EncoderBlockSpec>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        let rows = [(1, 3, 32), (2, 32, 64), (3, 64, 128), (5, 128, 256), (7, 256, 256)];
        Self {
            blocks: rows
                .iter()
                .map(|&(dilation, in_channels, out_channels)| EncoderBlockSpec {
                    kernel_size: 3,
                    dilation,
                    in_channels,
                    out_channels,
                })
                .collect(),
        }
    }
}

impl EncoderSpec {
    pub const NUM_BLOCKS: usize = 5;
    /// Total downsampling between the input and the last block.
    pub const OUTPUT_STRIDE: usize = 16;

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != Self::NUM_BLOCKS {
            return Err(Error::Config(format!(
                "encoder needs {} blocks, got {}",
                Self::NUM_BLOCKS,
                self.blocks.len()
            )));
        }
        if self.blocks[0].in_channels != 3 {
            return Err(Error::Config("encoder input must have 3 channels".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel_size % 2 == 0 || b.dilation == 0 || b.out_channels == 0 {
                return Err(Error::Config(format!("encoder block {} is malformed: {b:?}", i + 1)));
            }
            if i > 0 && b.in_channels != self.blocks[i - 1].out_channels {
                return Err(Error::Config(format!(
                    "encoder block {} expects {} input channels but block {} emits {}",
                    i + 1,
                    b.in_channels,
                    i,
                    self.blocks[i - 1].out_channels
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self, block: usize) -> usize {
        self.blocks[block].out_channels
    }
}

struct EncoderBlock {
    first: ConvBnRelu,
    second: ConvBnRelu,
}

pub struct Encoder {
    blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let name = format!("encoder.{}", i + 1);
                Ok(EncoderBlock {
                    first: ConvBnRelu::new(store, &format!("{name}.0"), b.in_channels, b.out_channels, b.kernel_size, b.dilation)?,
                    second: ConvBnRelu::new(store, &format!("{name}.1"), b.out_channels, b.out_channels, b.kernel_size, b.dilation)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    /// Returns the five block outputs E1..E5.
    pub fn forward(&self, image: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        check_input(image)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut x = image.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                x = ops::max_pool2(&x)?;
            }
            x = block.second.forward(&block.first.forward(&x, train)?, train)?;
            outs.push(x.clone());
        }
        Ok(outs)
    }
}

pub(crate) fn check_input(image: &Tensor) -> Result<()> {
    let dims = image.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::Shape(format!(
            "expected a (batch, 3, height, width) image, got {dims:?}"
        )));
    }
    let (h, w) = (dims[2], dims[3]);
    let s = EncoderSpec::OUTPUT_STRIDE;
    if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!(
            "input spatial size {h}x{w} must be a positive multiple of {s}"
        )));
    }
    Ok(())
}
