//! Mask decoder: fuses memory readout with query features and upsamples to
//! a full-resolution two-class probability map.
//!
//! Channel 1 of the output is the foreground probability throughout the
//! crate; see [`FOREGROUND`].

use crate::error::{Error, Result};
use crate::layers::{Conv, ConvNormRelu};
use crate::params::{Forward, ParamStore};
use crate::tape::Var;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Index of the foreground class along the class axis.
pub const FOREGROUND: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Output channels of each conv stage; one x2 upsample follows each.
    pub stage_channels: Vec<usize>,
    /// Reserved for encoder skip connections; must be false.
    pub skip_connections: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![64, 32, 16],
            skip_connections: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, downscale: usize) -> Result<()> {
        if 1usize << self.stage_channels.len() != downscale {
            return Err(Error::Config(format!(
                "{} decoder stages cannot undo downscale {downscale}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("decoder channels must be >= 1".into()));
        }
        if self.skip_connections {
            return Err(Error::Config("decoder skip connections are not implemented".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    stages: Vec<ConvNormRelu>,
    head: Conv,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        config: &DecoderConfig,
        in_channels: usize,
        downscale: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(downscale)?;
        let mut prev = in_channels;
        let mut stages = Vec::new();
        for (i, &ch) in config.stage_channels.iter().enumerate() {
            stages.push(ConvNormRelu::new(store, &format!("decoder.s{i}"), prev, ch, 1, rng)?);
            prev = ch;
        }
        Ok(Self {
            stages,
            head: Conv::new(store, "decoder.head", prev, 2, 1, 1, rng)?,
        })
    }

    /// Returns `[1,2,H,W]` class probabilities.
    pub fn forward(&self, cx: &mut Forward, readout: Var, query: Var) -> Result<Var> {
        let (rs, qs) = (cx.tape.shape(readout), cx.tape.shape(query));
        if rs.len() != 4 || qs.len() != 4 || rs[2..] != qs[2..] || rs[0] != qs[0] {
            return Err(Error::shape(
                "decode",
                format!("readout {rs:?} vs query {qs:?}"),
            ));
        }
        let mut h = cx.tape.concat(&[readout, query], 1)?;
        for stage in &self.stages {
            h = stage.forward(cx, h)?;
            h = cx.tape.upsample2x(h)?;
        }
        let logits = self.head.forward(cx, h)?;
        cx.tape.softmax(logits, 1)
    }
}
