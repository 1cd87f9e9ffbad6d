use lorafwi_tensor::ops::{conv_output_extent, conv_transpose_output_extent, ConvGeometry};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Tiny,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

/// One conv (or transposed conv) + batch norm + leaky ReLU block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: LayerKind,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl BlockSpec {
    pub const fn conv(out_channels: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self {
            kind: LayerKind::Conv,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub const fn conv3(out_channels: usize, stride: usize) -> Self {
        Self::conv(out_channels, (3, 3), (stride, stride), (1, 1))
    }

    pub const fn up(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::ConvTranspose,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.padding)
    }

    fn output_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let f = match self.kind {
            LayerKind::Conv => conv_output_extent,
            LayerKind::ConvTranspose => conv_transpose_output_extent,
        };
        Some((
            f(h, self.kernel.0, self.stride.0, self.padding.0)?,
            f(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Network geometry. The decoder output is center-cropped to `out_size` and
/// projected to one channel by a 3x3 conv followed by tanh.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Number of sources S.
    pub in_channels: usize,
    pub in_time: usize,
    pub in_receivers: usize,
    /// Side V of the square velocity map.
    pub out_size: usize,
    pub latent_channels: usize,
    pub encoder: Vec<BlockSpec>,
    pub decoder: Vec<BlockSpec>,
}

/// Extents derived from a validated config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    /// Decoder output side before cropping.
    pub decoded: (usize, usize),
    /// Margin removed on each side.
    pub crop: (usize, usize),
}

impl ModelConfig {
    /// Parameter-count-faithful preset: 5x1000x70 gathers to 70x70 maps.
    pub fn full() -> Self {
        let t = |c, s| BlockSpec::conv(c, (3, 1), (s, 1), (1, 0));
        Self {
            preset: Preset::Full,
            in_channels: 5,
            in_time: 1000,
            in_receivers: 70,
            out_size: 70,
            latent_channels: 512,
            encoder: vec![
                BlockSpec::conv(32, (7, 1), (2, 1), (3, 0)),
                t(64, 2),
                t(64, 1),
                t(64, 2),
                t(64, 1),
                t(128, 2),
                t(128, 1),
                BlockSpec::conv3(128, 2),
                BlockSpec::conv3(128, 1),
                BlockSpec::conv3(256, 2),
                BlockSpec::conv3(256, 1),
                BlockSpec::conv3(256, 2),
                BlockSpec::conv3(256, 1),
                BlockSpec::conv(512, (8, 9), (1, 1), (0, 0)),
            ],
            decoder: vec![
                BlockSpec::up(512, 5, 1, 0),
                BlockSpec::conv3(512, 1),
                BlockSpec::up(256, 4, 2, 1),
                BlockSpec::conv3(256, 1),
                BlockSpec::up(128, 4, 2, 1),
                BlockSpec::conv3(128, 1),
                BlockSpec::up(64, 4, 2, 1),
                BlockSpec::conv3(64, 1),
                BlockSpec::up(32, 4, 2, 1),
                BlockSpec::conv3(32, 1),
            ],
        }
    }

    /// Desk-scale preset: 3x256x32 gathers to 32x32 maps.
    pub fn tiny() -> Self {
        Self {
            preset: Preset::Tiny,
            in_channels: 3,
            in_time: 256,
            in_receivers: 32,
            out_size: 32,
            latent_channels: 64,
            encoder: vec![
                BlockSpec::conv(8, (7, 1), (2, 1), (3, 0)),
                BlockSpec::conv(16, (3, 1), (2, 1), (1, 0)),
                BlockSpec::conv(16, (3, 1), (2, 1), (1, 0)),
                BlockSpec::conv3(32, 2),
                BlockSpec::conv3(32, 1),
                BlockSpec::conv3(64, 2),
                BlockSpec::conv3(64, 1),
                BlockSpec::conv(64, (8, 8), (1, 1), (0, 0)),
            ],
            decoder: vec![
                BlockSpec::up(64, 4, 1, 0),
                BlockSpec::conv3(64, 1),
                BlockSpec::up(32, 4, 2, 1),
                BlockSpec::conv3(32, 1),
                BlockSpec::up(16, 4, 2, 1),
                BlockSpec::conv3(16, 1),
                BlockSpec::up(8, 4, 2, 1),
                BlockSpec::conv3(8, 1),
            ],
        }
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.in_channels, self.in_time, self.in_receivers]
    }

    pub fn output_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 1, self.out_size, self.out_size]
    }

    /// Walks the layer algebra, failing on the first block whose extents do
    /// not work out.
    pub fn validate(&self) -> Result<Layout> {
        if self.in_channels == 0 || self.in_time == 0 || self.in_receivers == 0 || self.out_size == 0 {
            return Err(Error::Config(format!(
                "input {}x{}x{} and output {} must be positive",
                self.in_channels, self.in_time, self.in_receivers, self.out_size
            )));
        }
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::Config("encoder and decoder need at least one block".into()));
        }
        let mut extent = (self.in_time, self.in_receivers);
        let mut channels = self.in_channels;
        for (i, block) in self.encoder.iter().enumerate() {
            extent = step(&format!("encoder.{i}"), block, channels, extent)?;
            channels = block.out_channels;
        }
        if extent != (1, 1) || channels != self.latent_channels {
            return Err(Error::LayerAlgebra {
                block: format!("encoder.{}", self.encoder.len() - 1),
                expected: format!("bottleneck {}x1x1", self.latent_channels),
                actual: format!("{channels}x{}x{}", extent.0, extent.1),
            });
        }
        for (i, block) in self.decoder.iter().enumerate() {
            extent = step(&format!("decoder.{i}"), block, channels, extent)?;
            channels = block.out_channels;
        }
        let v = self.out_size;
        let fits = |e: usize| e >= v && (e - v).is_multiple_of(2);
        if !fits(extent.0) || !fits(extent.1) {
            return Err(Error::LayerAlgebra {
                block: "crop".into(),
                expected: format!("decoder output at least {v}x{v} with an even margin"),
                actual: format!("{}x{}", extent.0, extent.1),
            });
        }
        Ok(Layout {
            decoded: extent,
            crop: ((extent.0 - v) / 2, (extent.1 - v) / 2),
        })
    }
}

fn step(name: &str, block: &BlockSpec, in_channels: usize, extent: (usize, usize)) -> Result<(usize, usize)> {
    let bad = |expected: String| Error::LayerAlgebra {
        block: name.to_string(),
        expected,
        actual: format!("input {in_channels}x{}x{}", extent.0, extent.1),
    };
    if block.out_channels == 0 || block.kernel.0 == 0 || block.kernel.1 == 0 || block.stride.0 == 0 || block.stride.1 == 0 {
        return Err(bad("positive channels, kernel and stride".into()));
    }
    block.output_extent(extent.0, extent.1).ok_or_else(|| {
        bad(format!(
            "kernel {:?} with stride {:?} and padding {:?} to produce a positive extent",
            block.kernel, block.stride, block.padding
        ))
    })
}
