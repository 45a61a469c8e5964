//! Four-stage convolutional backbone producing a halving-resolution pyramid.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DropError, Result};
use crate::nn::{all_finite, BatchNorm, Conv2d, Padding, Scope};

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Channels of the four stages, shallow to deep.
    pub stage_channels: [usize; NUM_STAGES],
    /// Spatial reduction from the input to stage 1. Must be a power of two.
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
    /// Residual blocks per stage.
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
}

fn default_stem_stride() -> usize {
    4
}

fn default_blocks() -> usize {
    1
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_height: 128,
            input_width: 64,
            stage_channels: [16, 32, 64, 128],
            stem_stride: 4,
            blocks_per_stage: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(DropError::Config("stage_channels must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DropError::Config(format!(
                "stage_channels must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        if self.stem_stride == 0 || !self.stem_stride.is_power_of_two() {
            return Err(DropError::Config(format!(
                "stem_stride must be a power of two, got {}",
                self.stem_stride
            )));
        }
        let unit = self.stem_stride * (1 << (NUM_STAGES - 1));
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % unit != 0
            || self.input_width % unit != 0
        {
            return Err(DropError::Config(format!(
                "input {}x{} must be divisible by stem_stride*8 = {unit}",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    /// `(height, width)` of stage `i` (0-based).
    pub fn stage_size(&self, i: usize) -> (usize, usize) {
        let div = self.stem_stride << i;
        (self.input_height / div, self.input_width / div)
    }
}

/// Stage feature maps `[B, C_i, H_i, W_i]`, shallow to deep.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        if stages.len() != NUM_STAGES {
            return Err(DropError::Internal(format!(
                "pyramid needs {NUM_STAGES} stages, got {}",
                stages.len()
            )));
        }
        for s in &stages {
            s.dims4()?;
        }
        Ok(Self { stages })
    }

    pub fn stage(&self, i: usize) -> &Tensor {
        &self.stages[i]
    }

    pub fn spatial(&self, i: usize) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.stages[i].dims4()?;
        Ok((h, w))
    }

    pub fn channels(&self, i: usize) -> Result<usize> {
        Ok(self.stages[i].dim(1)?)
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.stages[0].dim(0)?)
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(scope: &Scope, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&scope.pp("conv"), cin, cout, 3, stride, Padding::Zeros, false)?,
            bn: BatchNorm::new(&scope.pp("bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    first: ConvBn,
    second: ConvBn,
}

impl ResidualBlock {
    fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            first: ConvBn::new(&scope.pp("0"), channels, channels, 1)?,
            second: ConvBn::new(&scope.pp("1"), channels, channels, 1)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.first.forward(x, train)?.relu()?;
        let y = self.second.forward(&y, train)?;
        Ok((y + x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    /// Stride-2 transition from the previous stage; the first stage has none.
    transition: Option<ConvBn>,
    blocks: Vec<ResidualBlock>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Vec<ConvBn>,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(scope: &Scope, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let c = config.stage_channels;
        let num_stem = config.stem_stride.trailing_zeros() as usize;
        let mut stem = Vec::with_capacity(num_stem.max(1));
        let mut cin = 3;
        for i in 0..num_stem {
            stem.push(ConvBn::new(&scope.pp(format!("stem.{i}")), cin, c[0], 2)?);
            cin = c[0];
        }
        if num_stem == 0 {
            stem.push(ConvBn::new(&scope.pp("stem.0"), 3, c[0], 1)?);
        }
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (i, &ch) in c.iter().enumerate() {
            let s = scope.pp(format!("stage{}", i + 1));
            let transition = if i == 0 {
                None
            } else {
                Some(ConvBn::new(&s.pp("transition"), c[i - 1], ch, 2)?)
            };
            let blocks = (0..config.blocks_per_stage)
                .map(|b| ResidualBlock::new(&s.pp(format!("block{b}")), ch))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { transition, blocks });
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `images` is `[B, 3, H, W]` with values in `[0, 1]`.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4().map_err(|_| {
            DropError::Config(format!("expected [B, 3, H, W] images, got {:?}", images.dims()))
        })?;
        if c != 3 || h != self.config.input_height || w != self.config.input_width {
            return Err(DropError::Config(format!(
                "image [{c}, {h}, {w}] does not match backbone input [3, {}, {}]",
                self.config.input_height, self.config.input_width
            )));
        }
        let mut x = images.clone();
        for conv in &self.stem {
            x = conv.forward(&x, train)?.relu()?;
        }
        let mut outputs = Vec::with_capacity(NUM_STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(t) = &stage.transition {
                x = t.forward(&x, train)?.relu()?;
            }
            for block in &stage.blocks {
                x = block.forward(&x, train)?;
            }
            if !all_finite(&x)? {
                return Err(DropError::NonFiniteStage { stage: i + 1 });
            }
            outputs.push(x.clone());
        }
        FeaturePyramid::new(outputs)
    }
}
