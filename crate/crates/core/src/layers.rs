//! Convolutional building blocks shared by the encoders and the decoder.

use crate::error::Result;
use crate::params::{kaiming_uniform, Forward, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;
use rand::Rng;

/// Upper bound on group-norm groups.
pub const MAX_GROUPS: usize = 8;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Number of normalisation groups used for `channels` channels.
pub fn groups_for(channels: usize) -> usize {
    gcd(MAX_GROUPS, channels)
}

#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.insert(
            format!("{name}.weight"),
            kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(vec![out_ch]))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, cx: &mut Forward, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(vec![channels]))?,
            groups: groups_for(channels),
        })
    }

    pub fn forward(&self, cx: &mut Forward, x: Var) -> Result<Var> {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        cx.tape.group_norm(x, g, b, self.groups)
    }
}

/// conv -> group norm -> relu
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    conv: Conv,
    norm: GroupNorm,
}

impl ConvNormRelu {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), in_ch, out_ch, 3, stride, rng)?,
            norm: GroupNorm::new(store, &format!("{name}.norm"), out_ch)?,
        })
    }

    pub fn forward(&self, cx: &mut Forward, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.norm.forward(cx, y)?;
        cx.tape.relu(y)
    }
}

/// Two 3x3 conv/norm layers with an identity shortcut.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    first: ConvNormRelu,
    conv: Conv,
    norm: GroupNorm,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: ConvNormRelu::new(store, &format!("{name}.a"), channels, channels, 1, rng)?,
            conv: Conv::new(store, &format!("{name}.b.conv"), channels, channels, 3, 1, rng)?,
            norm: GroupNorm::new(store, &format!("{name}.b.norm"), channels)?,
        })
    }

    pub fn forward(&self, cx: &mut Forward, x: Var) -> Result<Var> {
        let y = self.first.forward(cx, x)?;
        let y = self.conv.forward(cx, y)?;
        let y = self.norm.forward(cx, y)?;
        let y = cx.tape.add(x, y)?;
        cx.tape.relu(y)
    }
}

/// Stack of stages, each a stride-2 conv followed by residual blocks.
#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<(ConvNormRelu, Vec<ResidualBlock>)>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        channels: &[usize],
        blocks_per_stage: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(channels.len());
        let mut prev = in_ch;
        for (i, &ch) in channels.iter().enumerate() {
            let down = ConvNormRelu::new(store, &format!("{name}.s{i}.down"), prev, ch, 2, rng)?;
            let blocks = (0..blocks_per_stage)
                .map(|b| ResidualBlock::new(store, &format!("{name}.s{i}.r{b}"), ch, rng))
                .collect::<Result<_>>()?;
            stages.push((down, blocks));
            prev = ch;
        }
        Ok(Self { stages })
    }

    pub fn forward(&self, cx: &mut Forward, x: Var) -> Result<Var> {
        let mut h = x;
        for (down, blocks) in &self.stages {
            h = down.forward(cx, h)?;
            for b in blocks {
                h = b.forward(cx, h)?;
            }
        }
        Ok(h)
    }
}
