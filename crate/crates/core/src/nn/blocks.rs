//! Layers that own parameters, and the composite blocks built from them.
//!
//! Every composite stage is pre-activation: ReLU, then batch
//! normalization, then convolution.

use rand::Rng;

use super::{batchnorm, conv3d, he_normal, Ctx, ParamId, ParamStore, StatsId};
use crate::error::{Error, Result};
use crate::tensor::{add, concat_channels, relu, Tensor, Var};

fn check_channels(ctx: &Ctx<'_>, x: Var, expect: usize, what: &str) -> Result<()> {
    let shape = ctx.tape.shape(x)?;
    if shape.len() != 5 || shape[1] != expect {
        return Err(Error::contract(format!(
            "{what} expects {expect} input channels, got shape {shape:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv3d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * kernel.pow(3);
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[out_ch, in_ch, kernel, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Conv3d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        out_ch * in_ch * kernel.pow(3) + out_ch
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        conv3d(ctx.tape, x, ctx.var(self.weight), Some(ctx.var(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub channels: usize,
}

impl BatchNorm3d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm3d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            stats: store.add_stats(name, channels),
            channels,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (tape, mode, bn) = (ctx.tape, ctx.mode, ctx.bn);
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        batchnorm(tape, x, g, b, ctx.stats_mut(self.stats), bn, mode)
    }
}

/// ReLU → BatchNorm → convolution.
#[derive(Clone, Debug)]
struct PreActConv {
    bn: BatchNorm3d,
    conv: Conv3d,
}

impl PreActConv {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        PreActConv {
            bn: BatchNorm3d::new(store, &format!("{name}.bn"), in_ch),
            conv: Conv3d::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, rng),
        }
    }

    fn param_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        BatchNorm3d::param_count(in_ch) + Conv3d::param_count(in_ch, out_ch, kernel)
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let a = relu(ctx.tape, x)?;
        let n = self.bn.forward(ctx, a)?;
        ctx.tape.release(a);
        let y = self.conv.forward(ctx, n)?;
        ctx.tape.release(n);
        Ok(y)
    }
}

/// ReLU → BatchNorm → 1×1×1 convolution changing the channel count.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    stage: PreActConv,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Bottleneck {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Bottleneck {
            stage: PreActConv::new(store, name, in_ch, out_ch, 1, rng),
            in_ch,
            out_ch,
        }
    }

    pub fn param_count(in_ch: usize, out_ch: usize) -> usize {
        PreActConv::param_count(in_ch, out_ch, 1)
    }

    pub fn conv(&self) -> &Conv3d {
        &self.stage.conv
    }

    pub fn batchnorm(&self) -> &BatchNorm3d {
        &self.stage.bn
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.in_ch, "bottleneck")?;
        self.stage.forward(ctx, x)
    }
}

/// Two pre-activation 3×3×3 stages whose result is added to the input.
#[derive(Clone, Debug)]
pub struct ResNetBlock {
    stages: [PreActConv; 2],
    pub channels: usize,
}

/// Trainable scalars in a [`ResNetBlock`] of the given width.
pub fn resnet_block_params(ch: usize) -> usize {
    2 * PreActConv::param_count(ch, ch, 3)
}

impl ResNetBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Self {
        ResNetBlock {
            stages: [
                PreActConv::new(store, &format!("{name}.0"), ch, ch, 3, rng),
                PreActConv::new(store, &format!("{name}.1"), ch, ch, 3, rng),
            ],
            channels: ch,
        }
    }

    pub fn convs(&self) -> [&Conv3d; 2] {
        [&self.stages[0].conv, &self.stages[1].conv]
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.channels, "resnet block")?;
        let f0 = self.stages[0].forward(ctx, x)?;
        let f1 = self.stages[1].forward(ctx, f0)?;
        ctx.tape.release(f0);
        let y = add(ctx.tape, x, f1)?;
        ctx.tape.release(f1);
        Ok(y)
    }
}

/// Dense variant: each 3×3×3 stage sees the concatenation of the block input
/// and every earlier stage output, and a 1×1×1 stage projects the full
/// concatenation back to the block width.
#[derive(Clone, Debug)]
pub struct DenseNetBlock {
    stages: [PreActConv; 2],
    projection: PreActConv,
    pub channels: usize,
    pub growth: usize,
}

/// Trainable scalars in a [`DenseNetBlock`] of width `ch` and growth `g`.
pub fn densenet_block_params(ch: usize, g: usize) -> usize {
    PreActConv::param_count(ch, g, 3)
        + PreActConv::param_count(ch + g, g, 3)
        + PreActConv::param_count(ch + 2 * g, ch, 1)
}

/// Growth rate whose dense block parameter count is closest to a residual
/// block of the same width.
///
/// The dense count is `27g² + (56c + 8)g + c² + 7c`; the positive root of
/// that quadratic against the residual count is rounded to the better of
/// its two integer neighbours.
pub fn dense_growth_for(ch: usize) -> usize {
    let target = resnet_block_params(ch) as f64;
    let c = ch as f64;
    let (a, b, k) = (27.0, 56.0 * c + 8.0, c * c + 7.0 * c - target);
    let root = (-b + (b * b - 4.0 * a * k).sqrt()) / (2.0 * a);
    let lo = (root.floor() as usize).max(1);
    [lo, lo + 1]
        .into_iter()
        .min_by_key(|&g| densenet_block_params(ch, g).abs_diff(resnet_block_params(ch)))
        .expect("two candidates")
}

impl DenseNetBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, ch: usize, growth: usize, rng: &mut R) -> Self {
        DenseNetBlock {
            stages: [
                PreActConv::new(store, &format!("{name}.0"), ch, growth, 3, rng),
                PreActConv::new(store, &format!("{name}.1"), ch + growth, growth, 3, rng),
            ],
            projection: PreActConv::new(store, &format!("{name}.proj"), ch + 2 * growth, ch, 1, rng),
            channels: ch,
            growth,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.channels, "densenet block")?;
        let f0 = self.stages[0].forward(ctx, x)?;
        let cat0 = concat_channels(ctx.tape, x, f0)?;
        ctx.tape.release(f0);
        let f1 = self.stages[1].forward(ctx, cat0)?;
        let cat1 = concat_channels(ctx.tape, cat0, f1)?;
        ctx.tape.release(cat0);
        ctx.tape.release(f1);
        let y = self.projection.forward(ctx, cat1)?;
        ctx.tape.release(cat1);
        Ok(y)
    }
}
