//! Gated fusion module: per-stream GATE re-weighting, pairwise channel
//! cross-attention (CAM), and adaptive three-way fusion.

use rand::Rng;

use crate::blocks::{simple_gate, Conv2d, Init, LayerNorm};
use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{pool_stats, Padding, PoolKind, Scalar, Tensor};
use crate::trace::Trace;

/// Two-branch channel re-weighting. The mean-pooled and std-pooled
/// statistics each pass FC → SG → FC → Sigmoid; the averaged coefficients
/// scale the input channels.
pub struct Gate<T: Scalar> {
    pub a1: Conv2d<T>,
    pub a2: Conv2d<T>,
    pub b1: Conv2d<T>,
    pub b2: Conv2d<T>,
}

impl<T: Scalar> Gate<T> {
    pub fn new<R: Rng>(rng: &mut R, channels: usize) -> Result<Self> {
        if channels % 4 != 0 {
            return Err(Error::config(format!(
                "GATE needs channels divisible by 4 (FC bottleneck + SG), got {channels}"
            )));
        }
        let fc = |rng: &mut R, cin, cout| Conv2d::new(rng, cin, cout, 1, 1, Padding::Zero, 1, Init::FanIn);
        Ok(Gate {
            a1: fc(rng, channels, channels / 2),
            a2: fc(rng, channels / 4, channels),
            b1: fc(rng, channels, channels / 2),
            b2: fc(rng, channels / 4, channels),
        })
    }

    /// Re-weight coefficients in (0,1)^C, shape N×C×1×1.
    pub fn coefficients(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a = ops::sigmoid(&self.a2.forward(&simple_gate(
            &self.a1.forward(&pool_stats(x, PoolKind::Gap)?)?,
        )?)?)?;
        let b = ops::sigmoid(&self.b2.forward(&simple_gate(
            &self.b1.forward(&pool_stats(x, PoolKind::Gsp)?)?,
        )?)?)?;
        ops::scale(&ops::add(&a, &b)?, 0.5)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::mul_bc(x, &self.coefficients(x)?)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.a1.visit(&format!("{prefix}.a1"), f);
        self.a2.visit(&format!("{prefix}.a2"), f);
        self.b1.visit(&format!("{prefix}.b1"), f);
        self.b2.visit(&format!("{prefix}.b2"), f);
    }
}

/// Cross-attention over channels: a C×C similarity between the two
/// streams' channel descriptors weights their value projections; the
/// output adds both cross-weighted features back onto the inputs.
pub struct Cam<T: Scalar> {
    pub ln_a: LayerNorm<T>,
    pub ln_b: LayerNorm<T>,
    pub q: Conv2d<T>,
    pub k: Conv2d<T>,
    pub va: Conv2d<T>,
    pub vb: Conv2d<T>,
}

impl<T: Scalar> Cam<T> {
    pub fn new<R: Rng>(rng: &mut R, channels: usize) -> Self {
        let fc = |rng: &mut R| Conv2d::new(rng, channels, channels, 1, 1, Padding::Zero, 1, Init::FanIn);
        Cam {
            ln_a: LayerNorm::new(channels),
            ln_b: LayerNorm::new(channels),
            q: fc(rng),
            k: fc(rng),
            va: fc(rng),
            vb: fc(rng),
        }
    }

    pub fn forward(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::dim(format!(
                "cam_fuse: stream shapes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let s = a.shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let flat = [n, c, h * w];

        let qm = ops::reshape(&self.q.forward(&self.ln_a.forward(a)?)?, &flat)?;
        let km = ops::reshape(&self.k.forward(&self.ln_b.forward(b)?)?, &flat)?;
        // Similarity over channel descriptors: N×C×C.
        let sim = ops::matmul(&qm, &ops::transpose_last2(&km)?)?;

        let va = ops::reshape(&self.va.forward(a)?, &flat)?;
        let vb = ops::reshape(&self.vb.forward(b)?, &flat)?;
        // Softmax along the key axis of each score matrix.
        let wa = ops::matmul(&ops::softmax(&ops::transpose_last2(&sim)?, 2)?, &va)?;
        let wb = ops::matmul(&ops::softmax(&sim, 2)?, &vb)?;

        let sum = ops::add(&ops::add(a, b)?, &ops::reshape(&wa, &s)?)?;
        ops::add(&sum, &ops::reshape(&wb, &s)?)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.ln_a.visit(&format!("{prefix}.ln_a"), f);
        self.ln_b.visit(&format!("{prefix}.ln_b"), f);
        self.q.visit(&format!("{prefix}.q"), f);
        self.k.visit(&format!("{prefix}.k"), f);
        self.va.visit(&format!("{prefix}.va"), f);
        self.vb.visit(&format!("{prefix}.vb"), f);
    }
}

/// The full gated fusion module for one GSFF block.
pub struct Gfm<T: Scalar> {
    pub gate_s: Gate<T>,
    pub gate_l: Gate<T>,
    pub gate_h: Gate<T>,
    pub cam_sl: Cam<T>,
    pub cam_sh: Cam<T>,
    pub cam_lh: Cam<T>,
    pub weight_proj: Conv2d<T>,
    pub out_proj: Conv2d<T>,
}

impl<T: Scalar> Gfm<T> {
    pub fn new<R: Rng>(rng: &mut R, channels: usize) -> Result<Self> {
        Ok(Gfm {
            gate_s: Gate::new(rng, channels)?,
            gate_l: Gate::new(rng, channels)?,
            gate_h: Gate::new(rng, channels)?,
            cam_sl: Cam::new(rng, channels),
            cam_sh: Cam::new(rng, channels),
            cam_lh: Cam::new(rng, channels),
            weight_proj: Conv2d::new(rng, 3 * channels, 3, 1, 1, Padding::Zero, 1, Init::FanIn),
            out_proj: Conv2d::new(rng, channels, channels, 1, 1, Padding::Zero, 1, Init::FanIn),
        })
    }

    /// Per-position convex weights over the three fused streams, N×3×H×W.
    pub fn fusion_weights(
        &self,
        x_sl: &Tensor<T>,
        x_sh: &Tensor<T>,
        x_lh: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let logits = self
            .weight_proj
            .forward(&ops::concat(&[x_sl.clone(), x_sh.clone(), x_lh.clone()], 1)?)?;
        ops::softmax(&logits, 1)
    }

    /// Convex per-position mixture of the three streams, then a 1×1
    /// projection.
    pub fn adaptive_fuse(
        &self,
        x_sl: &Tensor<T>,
        x_sh: &Tensor<T>,
        x_lh: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if x_sl.shape() != x_sh.shape() || x_sl.shape() != x_lh.shape() {
            return Err(Error::dim("adaptive_fuse: stream shapes differ".to_string()));
        }
        let weights = self.fusion_weights(x_sl, x_sh, x_lh)?;
        let parts = ops::split(&weights, 1, 3)?;
        let mix = ops::add(
            &ops::add(&ops::mul_bc(x_sl, &parts[0])?, &ops::mul_bc(x_sh, &parts[1])?)?,
            &ops::mul_bc(x_lh, &parts[2])?,
        )?;
        self.out_proj.forward(&mix)
    }

    pub fn forward(
        &self,
        x_s: &Tensor<T>,
        x_l: &Tensor<T>,
        x_h: &Tensor<T>,
        mut trace: Option<(&mut Trace<T>, &str)>,
    ) -> Result<Tensor<T>> {
        if x_s.shape() != x_l.shape() || x_s.shape() != x_h.shape() {
            return Err(Error::dim("gfm_forward: stream shapes differ".to_string()));
        }
        let gs = self.gate_s.forward(x_s)?;
        let gl = self.gate_l.forward(x_l)?;
        let gh = self.gate_h.forward(x_h)?;
        if let Some((t, prefix)) = trace.as_mut() {
            t.record(format!("{prefix}.gate_s"), &gs);
            t.record(format!("{prefix}.gate_l"), &gl);
            t.record(format!("{prefix}.gate_h"), &gh);
        }
        let sl = self.cam_sl.forward(&gs, &gl)?;
        let sh = self.cam_sh.forward(&gs, &gh)?;
        let lh = self.cam_lh.forward(&gl, &gh)?;
        if let Some((t, prefix)) = trace.as_mut() {
            t.record(format!("{prefix}.cam_sl"), &sl);
            t.record(format!("{prefix}.cam_sh"), &sh);
            t.record(format!("{prefix}.cam_lh"), &lh);
        }
        let fused = self.adaptive_fuse(&sl, &sh, &lh)?;
        if let Some((t, prefix)) = trace.as_mut() {
            t.record(format!("{prefix}.fused"), &fused);
        }
        Ok(fused)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.gate_s.visit(&format!("{prefix}.gate_s"), f);
        self.gate_l.visit(&format!("{prefix}.gate_l"), f);
        self.gate_h.visit(&format!("{prefix}.gate_h"), f);
        self.cam_sl.visit(&format!("{prefix}.cam_sl"), f);
        self.cam_sh.visit(&format!("{prefix}.cam_sh"), f);
        self.cam_lh.visit(&format!("{prefix}.cam_lh"), f);
        self.weight_proj.visit(&format!("{prefix}.weight_proj"), f);
        self.out_proj.visit(&format!("{prefix}.out_proj"), f);
    }
}
