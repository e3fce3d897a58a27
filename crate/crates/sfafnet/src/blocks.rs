//! Spatial-domain building blocks: Simple Gate, simplified channel
//! attention (SCA), SCABlock and NAFBlock.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{conv2d, layer_norm, pool_stats, Padding, PoolKind, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±1/sqrt(fan_in); biases zero.
    FanIn,
    /// Everything zero, so residual branches start dead.
    Zero,
}

/// Convolution layer: weight, bias and the fixed call configuration.
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        rng: &mut R,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        groups: usize,
        init: Init,
    ) -> Self {
        let cpg = cin / groups;
        let shape = [cout, cpg, k, k];
        let weight = match init {
            Init::Zero => Tensor::zeros(&shape),
            Init::FanIn => {
                let bound = 1.0 / ((cpg * k * k) as f64).sqrt();
                crate::tensor::rand_uniform(rng, &shape, -bound, bound)
            }
        };
        Conv2d {
            weight: weight.requires_grad(true),
            bias: Tensor::zeros(&[cout]).requires_grad(true),
            stride,
            padding,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding, self.groups)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
}

pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[channels], T::one()).requires_grad(true),
            beta: Tensor::zeros(&[channels]).requires_grad(true),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }
}

/// Split channels in half and multiply the halves elementwise.
pub fn simple_gate<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] % 2 != 0 {
        return Err(Error::dim(format!(
            "simple_gate needs an even channel count, got shape {s:?}"
        )));
    }
    let halves = ops::split(x, 1, 2)?;
    ops::mul(&halves[0], &halves[1])
}

/// Simplified channel attention: scale each channel by a 1×1 conv of its
/// global average, broadcast over space.
pub fn sca<T: Scalar>(x: &Tensor<T>, conv: &Conv2d<T>) -> Result<Tensor<T>> {
    let pooled = pool_stats(x, PoolKind::Gap)?;
    let coef = conv.forward(&pooled)?;
    ops::mul_bc(x, &coef)
}

/// SCABlock: 1×1 expand (C→2C) → depthwise 3×3 → SG (→C) → SCA → 1×1 project.
pub struct ScaBlock<T: Scalar> {
    pub expand: Conv2d<T>,
    pub dw: Conv2d<T>,
    pub sca: Conv2d<T>,
    pub project: Conv2d<T>,
}

impl<T: Scalar> ScaBlock<T> {
    pub fn new<R: Rng>(rng: &mut R, channels: usize) -> Self {
        ScaBlock {
            expand: Conv2d::new(rng, channels, 2 * channels, 1, 1, Padding::Zero, 1, Init::FanIn),
            dw: Conv2d::new(rng, 2 * channels, 2 * channels, 3, 1, Padding::Zero, 2 * channels, Init::FanIn),
            sca: Conv2d::new(rng, channels, channels, 1, 1, Padding::Zero, 1, Init::FanIn),
            // Zero-initialized projection keeps the enclosing residual dead at start.
            project: Conv2d::new(rng, channels, channels, 1, 1, Padding::Zero, 1, Init::Zero),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let gated = simple_gate(&self.dw.forward(&self.expand.forward(x)?)?)?;
        self.project.forward(&sca(&gated, &self.sca)?)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.expand.visit(&format!("{prefix}.expand"), f);
        self.dw.visit(&format!("{prefix}.dw"), f);
        self.sca.visit(&format!("{prefix}.sca"), f);
        self.project.visit(&format!("{prefix}.project"), f);
    }
}

/// NAFBlock: x1 = SCABlock(LN(x)) + x, then a gated FFN residual on x1.
pub struct NafBlock<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub sca_block: ScaBlock<T>,
    pub ln2: LayerNorm<T>,
    pub ffn_expand: Conv2d<T>,
    pub ffn_project: Conv2d<T>,
}

impl<T: Scalar> NafBlock<T> {
    pub fn new<R: Rng>(rng: &mut R, channels: usize) -> Self {
        NafBlock {
            ln1: LayerNorm::new(channels),
            sca_block: ScaBlock::new(rng, channels),
            ln2: LayerNorm::new(channels),
            ffn_expand: Conv2d::new(rng, channels, 2 * channels, 1, 1, Padding::Zero, 1, Init::FanIn),
            ffn_project: Conv2d::new(rng, channels, channels, 1, 1, Padding::Zero, 1, Init::Zero),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x1 = ops::add(&self.sca_block.forward(&self.ln1.forward(x)?)?, x)?;
        let ffn = self
            .ffn_project
            .forward(&simple_gate(&self.ffn_expand.forward(&self.ln2.forward(&x1)?)?)?)?;
        ops::add(&x1, &ffn)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.sca_block.visit(&format!("{prefix}.scab"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn_expand.visit(&format!("{prefix}.ffn_expand"), f);
        self.ffn_project.visit(&format!("{prefix}.ffn_project"), f);
    }
}
