//! Composite training loss (Charbonnier + edge + frequency terms over the
//! four output scales) and evaluation metrics (PSNR, SSIM, MAE).

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::tensor::fft::{fft2_complex, fft2_real, Direction};
use crate::tensor::ops;
use crate::tensor::{check_4d, conv2d, record_op, Padding, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Charbonnier constant.
    pub eps: f64,
    /// Weight of the frequency term.
    pub lambda_freq: f64,
    /// Weight of the edge term.
    pub delta_edge: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eps: 0.001,
            lambda_freq: 0.1,
            delta_edge: 0.05,
        }
    }
}

/// Mean over pixels of sqrt(diff² + eps²).
pub fn charbonnier<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let diff = ops::sub(pred, target)?;
    let sq = ops::mul(&diff, &diff)?;
    ops::mean(&ops::sqrt(&ops::add_scalar(&sq, eps * eps)?)?)
}

/// 4-neighbor discrete Laplacian (center −4), depthwise, reflect padding.
pub fn laplacian<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = check_4d(x, "laplacian input")?;
    let stencil = [
        T::zero(),
        T::one(),
        T::zero(),
        T::one(),
        T::from_f64(-4.0),
        T::one(),
        T::zero(),
        T::one(),
        T::zero(),
    ];
    let kernel = Tensor::from_vec(stencil.repeat(c), &[c, 1, 3, 3])?;
    conv2d(x, &kernel, None, 1, Padding::Reflect, c)
}

/// Charbonnier distance between the Laplacians of prediction and target.
pub fn edge_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    charbonnier(&laplacian(pred)?, &laplacian(target)?, eps)
}

/// Mean L1 over the real and imaginary parts of the per-channel 2-d DFT of
/// `diff`. The backward pass is one inverse transform of the sign spectrum.
fn spectral_l1<T: Scalar>(diff: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_4d(diff, "spectral_l1 input")?;
    let norm = 2.0 * (n * c * h * w) as f64;
    let total = diff.with_data(|d| {
        let mut acc = 0.0f64;
        for plane in d.chunks(h * w) {
            for bin in fft2_real(plane, h, w) {
                acc += bin.re.as_f64().abs() + bin.im.as_f64().abs();
            }
        }
        acc
    });
    record_op(
        "spectral_l1",
        vec![diff.clone()],
        vec![1],
        vec![T::from_f64(total / norm)],
        move |ins, _, g| {
            let scale = T::from_f64(g[0].as_f64() / norm);
            let gx = ins[0].with_data(|d| {
                let mut gx = vec![T::zero(); d.len()];
                for (plane, gplane) in d.chunks(h * w).zip(gx.chunks_mut(h * w)) {
                    let spec = fft2_real(plane, h, w);
                    let mut signs: Vec<Complex<T>> = spec
                        .iter()
                        .map(|b| Complex::new(T::from_f64(b.re.as_f64().signum_or_zero()),
                                              T::from_f64(b.im.as_f64().signum_or_zero())))
                        .collect();
                    fft2_complex(&mut signs, h, w, Direction::Inverse);
                    for (gv, s) in gplane.iter_mut().zip(&signs) {
                        *gv = s.re * scale;
                    }
                }
                gx
            });
            vec![Some(gx)]
        },
    )
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

/// Frequency loss: mean L1 spectral distance between prediction and target.
pub fn freq_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    spectral_l1(&ops::sub(pred, target)?)
}

/// Per-term values of one composite loss evaluation, for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub charbonnier: f64,
    pub edge: f64,
    pub freq: f64,
}

/// Composite loss over the four output scales:
/// Σᵢ [L_char + δ·L_edge + λ·L_freq].
pub fn total_loss<T: Scalar>(
    outputs: &[Tensor<T>],
    targets: &[Tensor<T>],
    cfg: &LossConfig,
) -> Result<(Tensor<T>, LossParts)> {
    if outputs.len() != 4 || targets.len() != 4 {
        return Err(Error::contract(format!(
            "total_loss expects 4 outputs and 4 targets, got {} and {}",
            outputs.len(),
            targets.len()
        )));
    }
    let mut parts = LossParts::default();
    let mut total: Option<Tensor<T>> = None;
    for (o, t) in outputs.iter().zip(targets) {
        if o.shape() != t.shape() {
            return Err(Error::dim(format!(
                "total_loss scale shape mismatch: {:?} vs {:?}",
                o.shape(),
                t.shape()
            )));
        }
        let c = charbonnier(o, t, cfg.eps)?;
        let e = edge_loss(o, t, cfg.eps)?;
        let f = freq_loss(o, t)?;
        parts.charbonnier += c.item().as_f64();
        parts.edge += e.item().as_f64();
        parts.freq += f.item().as_f64();
        let scale_loss = ops::add(
            &c,
            &ops::add(&ops::scale(&e, cfg.delta_edge)?, &ops::scale(&f, cfg.lambda_freq)?)?,
        )?;
        total = Some(match total {
            Some(acc) => ops::add(&acc, &scale_loss)?,
            None => scale_loss,
        });
    }
    Ok((total.expect("four scales"), parts))
}

// ---------------------------------------------------------------------------
// Metrics (plain, non-differentiable).
// ---------------------------------------------------------------------------

pub fn mse<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    acc / a.len() as f64
}

pub fn mae<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Peak signal-to-noise ratio in dB, capped at 100 for (near-)identical
/// inputs.
pub fn psnr<T: Scalar>(a: &[T], b: &[T], peak: f64) -> f64 {
    let m = mse(a, b);
    if m < 1e-10 {
        return 100.0;
    }
    (10.0 * (peak * peak / m).log10()).min(100.0)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let (dy, dx) = (i as f64 - half, j as f64 - half);
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Structural similarity over an 11×11 Gaussian window (σ=1.5), averaged
/// over all fully-interior positions and channels. Values in [0,1] assumed.
pub fn ssim<T: Scalar>(a: &[T], b: &[T], channels: usize, h: usize, w: usize) -> Result<f64> {
    if a.len() != channels * h * w || b.len() != a.len() {
        return Err(Error::dim("ssim: buffer sizes do not match C×H×W".to_string()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let half = SSIM_WINDOW / 2;
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        let pa = &a[c * h * w..(c + 1) * h * w];
        let pb = &b[c * h * w..(c + 1) * h * w];
        for cy in half..h - half {
            for cx in half..w - half {
                let (mut mu1, mut mu2) = (0.0, 0.0);
                let (mut m11, mut m22, mut m12) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wv = win[i * SSIM_WINDOW + j];
                        let va = pa[(cy + i - half) * w + cx + j - half].as_f64();
                        let vb = pb[(cy + i - half) * w + cx + j - half].as_f64();
                        mu1 += wv * va;
                        mu2 += wv * vb;
                        m11 += wv * va * va;
                        m22 += wv * vb * vb;
                        m12 += wv * va * vb;
                    }
                }
                let (s11, s22, s12) = (m11 - mu1 * mu1, m22 - mu2 * mu2, m12 - mu1 * mu2);
                let score = ((2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2))
                    / ((mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2));
                acc += score;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}
