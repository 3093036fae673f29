//! Query encoder (frame -> query/key features) and mask encoder
//! (mask + reused frame features -> value features).

use crate::error::{Error, Result};
use crate::layers::{Backbone, Conv};
use crate::params::{Forward, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `(height, width)` of input frames in pixels.
    pub input_resolution: (usize, usize),
    /// Total stride of the feature maps; `2^backbone_channels.len()`.
    pub downscale: usize,
    /// Output channels of each stride-2 stage of the frame backbone.
    pub backbone_channels: Vec<usize>,
    /// Output channels of each stage of the mask backbone.
    pub mask_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub key_dim: usize,
    pub query_dim: usize,
    pub value_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_resolution: (128, 128),
            downscale: 8,
            backbone_channels: vec![32, 64, 64],
            mask_channels: vec![32, 64, 64],
            blocks_per_stage: 2,
            key_dim: 16,
            query_dim: 32,
            value_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.backbone_channels.len();
        if stages == 0 || !self.downscale.is_power_of_two() || self.downscale != 1 << stages {
            return Err(Error::Config(format!(
                "downscale {} must equal 2^{} (one per backbone stage)",
                self.downscale, stages
            )));
        }
        if self.mask_channels.len() != stages {
            return Err(Error::Config(format!(
                "mask backbone has {} stages, frame backbone {stages}",
                self.mask_channels.len()
            )));
        }
        let (h, w) = self.input_resolution;
        if h == 0 || w == 0 || h % self.downscale != 0 || w % self.downscale != 0 {
            return Err(Error::Config(format!(
                "resolution {h}x{w} not divisible by downscale {}",
                self.downscale
            )));
        }
        let dims = [self.key_dim, self.query_dim, self.value_dim];
        if dims
            .iter()
            .chain(&self.backbone_channels)
            .chain(&self.mask_channels)
            .any(|&d| d == 0)
        {
            return Err(Error::Config("all feature dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial size `(H/s, W/s)` of every feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        (
            self.input_resolution.0 / self.downscale,
            self.input_resolution.1 / self.downscale,
        )
    }

    pub fn backbone_out(&self) -> usize {
        *self.backbone_channels.last().expect("validated")
    }
}

/// Per-frame outputs of the query encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    /// Backbone output before the projection heads, `[1, C_b, h, w]`.
    pub backbone: Tensor,
    /// `[1, query_dim, h, w]`
    pub query: Tensor,
    /// `[1, key_dim, h, w]`
    pub key: Tensor,
}

/// Where a memory value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    Predicted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueFeatures {
    /// `[1, value_dim, h, w]`
    pub value: Tensor,
    pub source_frame: usize,
    pub provenance: Provenance,
}

/// Tape handles of [`FrameFeatures`].
#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub backbone: Var,
    pub query: Var,
    pub key: Var,
}

#[derive(Clone, Debug)]
pub struct QueryEncoder {
    backbone: Backbone,
    key_head: Conv,
    query_head: Conv,
    config: EncoderConfig,
}

impl QueryEncoder {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(
            store,
            "query.backbone",
            3,
            &config.backbone_channels,
            config.blocks_per_stage,
            rng,
        )?;
        let c = config.backbone_out();
        Ok(Self {
            backbone,
            key_head: Conv::new(store, "query.key_head", c, config.key_dim, 3, 1, rng)?,
            query_head: Conv::new(store, "query.query_head", c, config.query_dim, 3, 1, rng)?,
            config: config.clone(),
        })
    }

    /// Encodes a `[1,3,H,W]` frame.
    pub fn forward(&self, cx: &mut Forward, frame: Var) -> Result<FrameVars> {
        let shape = cx.tape.shape(frame).to_vec();
        let (h, w) = self.config.input_resolution;
        let s = self.config.downscale;
        if shape.len() != 4 || shape[0] != 1 || shape[1] != 3 {
            return Err(Error::Input(format!("frame must be [1,3,H,W], got {shape:?}")));
        }
        if shape[2] % s != 0 || shape[3] % s != 0 {
            return Err(Error::Input(format!(
                "frame {}x{} not divisible by downscale {s}",
                shape[2], shape[3]
            )));
        }
        if (shape[2], shape[3]) != (h, w) {
            return Err(Error::Input(format!(
                "frame {}x{} does not match configured {h}x{w}",
                shape[2], shape[3]
            )));
        }
        let backbone = self.backbone.forward(cx, frame)?;
        let key = self.key_head.forward(cx, backbone)?;
        let query = self.query_head.forward(cx, backbone)?;
        Ok(FrameVars {
            backbone,
            query,
            key,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MaskEncoder {
    backbone: Backbone,
    fuse: Conv,
    out: Conv,
    config: EncoderConfig,
}

impl MaskEncoder {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(
            store,
            "mask.backbone",
            1,
            &config.mask_channels,
            config.blocks_per_stage,
            rng,
        )?;
        let joint = config.mask_channels.last().expect("validated") + config.backbone_out();
        Ok(Self {
            backbone,
            fuse: Conv::new(store, "mask.fuse", joint, config.value_dim, 3, 1, rng)?,
            out: Conv::new(store, "mask.out", config.value_dim, config.value_dim, 3, 1, rng)?,
            config: config.clone(),
        })
    }

    /// Encodes a `[1,1,H,W]` (soft) mask together with the frame's backbone
    /// features `[1,C_b,H/s,W/s]` into a value map.
    pub fn forward(&self, cx: &mut Forward, mask: Var, frame_backbone: Var) -> Result<Var> {
        let ms = cx.tape.shape(mask).to_vec();
        let fs = cx.tape.shape(frame_backbone).to_vec();
        let s = self.config.downscale;
        if ms.len() != 4 || ms[0] != 1 || ms[1] != 1 {
            return Err(Error::shape("encode_mask", format!("mask must be [1,1,H,W], got {ms:?}")));
        }
        if fs.len() != 4 || fs[2] * s != ms[2] || fs[3] * s != ms[3] {
            return Err(Error::shape(
                "encode_mask",
                format!(
                    "mask {}x{} downscales to {}x{}, backbone features are {fs:?}",
                    ms[2],
                    ms[3],
                    ms[2] / s,
                    ms[3] / s
                ),
            ));
        }
        let m = self.backbone.forward(cx, mask)?;
        let joint = cx.tape.concat(&[m, frame_backbone], 1)?;
        let h = self.fuse.forward(cx, joint)?;
        let h = cx.tape.relu(h)?;
        self.out.forward(cx, h)
    }
}
