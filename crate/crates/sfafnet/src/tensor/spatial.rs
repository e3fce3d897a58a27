//! Normalization, pooling and resampling ops on N×C×H×W tensors.

use crate::error::{Error, Result};
use crate::tensor::{check_4d, record_op, Scalar, Tensor};

/// Channel-wise layer normalization: at every (n, h, w) position the C
/// values are normalized to zero mean / unit variance (population), then
/// scaled by `gamma` and shifted by `beta` (both length C).
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_4d(x, "layer_norm input")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!(
            "layer_norm: gamma/beta must have shape [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let hw = h * w;
    let eps_t = T::from_f64(eps);
    let inv_c = T::from_f64(1.0 / c as f64);

    // Normalized values and inverse stddevs are saved for the backward pass.
    let mut xhat = vec![T::zero(); x.numel()];
    let mut invstd = vec![T::zero(); n * hw];
    let out = x.with_data(|xd| {
        gamma.with_data(|gd| {
            beta.with_data(|bd| {
                let mut o = vec![T::zero(); xd.len()];
                for ni in 0..n {
                    for p in 0..hw {
                        let at = |ci: usize| (ni * c + ci) * hw + p;
                        let mut mu = T::zero();
                        for ci in 0..c {
                            mu = mu + xd[at(ci)];
                        }
                        mu = mu * inv_c;
                        let mut var = T::zero();
                        for ci in 0..c {
                            let d = xd[at(ci)] - mu;
                            var = var + d * d;
                        }
                        var = var * inv_c;
                        let istd = T::one() / (var + eps_t).sqrt();
                        invstd[ni * hw + p] = istd;
                        for ci in 0..c {
                            let xh = (xd[at(ci)] - mu) * istd;
                            xhat[at(ci)] = xh;
                            o[at(ci)] = gd[ci] * xh + bd[ci];
                        }
                    }
                }
                o
            })
        })
    });
    record_op(
        "layer_norm",
        vec![x.clone(), gamma.clone(), beta.clone()],
        x.shape().to_vec(),
        out,
        move |ins, _, g| {
            let gamma = &ins[1];
            let mut gx = vec![T::zero(); g.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            gamma.with_data(|gd| {
                for ni in 0..n {
                    for p in 0..hw {
                        let at = |ci: usize| (ni * c + ci) * hw + p;
                        let istd = invstd[ni * hw + p];
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for ci in 0..c {
                            let go = g[at(ci)];
                            let xh = xhat[at(ci)];
                            ggamma[ci] = ggamma[ci] + go * xh;
                            gbeta[ci] = gbeta[ci] + go;
                            let dxh = go * gd[ci];
                            mean_dxhat = mean_dxhat + dxh;
                            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh;
                        }
                        mean_dxhat = mean_dxhat * inv_c;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_c;
                        for ci in 0..c {
                            let dxh = g[at(ci)] * gd[ci];
                            gx[at(ci)] =
                                istd * (dxh - mean_dxhat - xhat[at(ci)] * mean_dxhat_xhat);
                        }
                    }
                }
            });
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    /// Global average pool: spatial mean per channel.
    Gap,
    /// Global standard deviation pool (population) per channel.
    Gsp,
}

/// Global pooled statistics per channel, shape N×C×1×1.
pub fn pool_stats<T: Scalar>(x: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_4d(x, "pool_stats input")?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::dim("pool_stats needs H*W >= 1".to_string()));
    }
    let inv = T::from_f64(1.0 / hw as f64);
    let mut means = vec![T::zero(); n * c];
    let out = x.with_data(|xd| {
        let mut o = vec![T::zero(); n * c];
        for nc in 0..n * c {
            let plane = &xd[nc * hw..(nc + 1) * hw];
            let mut mu = T::zero();
            for v in plane {
                mu = mu + *v;
            }
            mu = mu * inv;
            means[nc] = mu;
            o[nc] = match kind {
                PoolKind::Gap => mu,
                PoolKind::Gsp => {
                    let mut var = T::zero();
                    for v in plane {
                        let d = *v - mu;
                        var = var + d * d;
                    }
                    (var * inv).sqrt()
                }
            };
        }
        o
    });
    record_op(
        "pool_stats",
        vec![x.clone()],
        vec![n, c, 1, 1],
        out.clone(),
        move |ins, _, g| {
            let gx = ins[0].with_data(|xd| {
                let mut gx = vec![T::zero(); xd.len()];
                for nc in 0..n * c {
                    match kind {
                        PoolKind::Gap => {
                            let gg = g[nc] * inv;
                            for p in 0..hw {
                                gx[nc * hw + p] = gg;
                            }
                        }
                        PoolKind::Gsp => {
                            // dsigma/dx_i = (x_i - mu) / (HW * sigma); zero for
                            // constant channels (numerator vanishes with the guard).
                            let sigma = out[nc];
                            let denom = sigma.max(T::from_f64(1e-12));
                            let k = g[nc] * inv / denom;
                            for p in 0..hw {
                                gx[nc * hw + p] = k * (xd[nc * hw + p] - means[nc]);
                            }
                        }
                    }
                }
                gx
            });
            vec![Some(gx)]
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// 2×2 average pooling; requires even H and W.
    Down2,
    /// Nearest-neighbor ×2 duplication.
    Up2,
}

pub fn resample<T: Scalar>(x: &Tensor<T>, dir: Resample) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_4d(x, "resample input")?;
    match dir {
        Resample::Down2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::dim(format!(
                    "down2 requires even spatial size, got {h}x{w}"
                )));
            }
            let (oh, ow) = (h / 2, w / 2);
            let quarter = T::from_f64(0.25);
            let out = x.with_data(|xd| {
                let mut o = vec![T::zero(); n * c * oh * ow];
                for nc in 0..n * c {
                    let src = &xd[nc * h * w..(nc + 1) * h * w];
                    let dst = &mut o[nc * oh * ow..(nc + 1) * oh * ow];
                    for i in 0..oh {
                        for j in 0..ow {
                            let s = src[2 * i * w + 2 * j]
                                + src[2 * i * w + 2 * j + 1]
                                + src[(2 * i + 1) * w + 2 * j]
                                + src[(2 * i + 1) * w + 2 * j + 1];
                            dst[i * ow + j] = s * quarter;
                        }
                    }
                }
                o
            });
            record_op("down2", vec![x.clone()], vec![n, c, oh, ow], out, move |_, _, g| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                    let gdst = &mut gx[nc * h * w..(nc + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = gsrc[i * ow + j] * quarter;
                            gdst[2 * i * w + 2 * j] = gv;
                            gdst[2 * i * w + 2 * j + 1] = gv;
                            gdst[(2 * i + 1) * w + 2 * j] = gv;
                            gdst[(2 * i + 1) * w + 2 * j + 1] = gv;
                        }
                    }
                }
                vec![Some(gx)]
            })
        }
        Resample::Up2 => {
            let (oh, ow) = (h * 2, w * 2);
            let out = x.with_data(|xd| {
                let mut o = vec![T::zero(); n * c * oh * ow];
                for nc in 0..n * c {
                    let src = &xd[nc * h * w..(nc + 1) * h * w];
                    let dst = &mut o[nc * oh * ow..(nc + 1) * oh * ow];
                    for i in 0..oh {
                        for j in 0..ow {
                            dst[i * ow + j] = src[(i / 2) * w + j / 2];
                        }
                    }
                }
                o
            });
            record_op("up2", vec![x.clone()], vec![n, c, oh, ow], out, move |_, _, g| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                    let gdst = &mut gx[nc * h * w..(nc + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            gdst[(i / 2) * w + j / 2] =
                                gdst[(i / 2) * w + j / 2] + gsrc[i * ow + j];
                        }
                    }
                }
                vec![Some(gx)]
            })
        }
    }
}

/// Average pooling to a fixed output grid; region i spans
/// [floor(i*H/out), ceil((i+1)*H/out)).
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_4d(x, "adaptive_avg_pool input")?;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::dim(format!(
            "adaptive_avg_pool: target {oh}x{ow} invalid for input {h}x{w}"
        )));
    }
    let bounds = |len: usize, out: usize, i: usize| -> (usize, usize) {
        let lo = i * len / out;
        let hi = ((i + 1) * len).div_ceil(out);
        (lo, hi)
    };
    let out = x.with_data(|xd| {
        let mut o = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut o[nc * oh * ow..(nc + 1) * oh * ow];
            for i in 0..oh {
                let (i0, i1) = bounds(h, oh, i);
                for j in 0..ow {
                    let (j0, j1) = bounds(w, ow, j);
                    let mut acc = T::zero();
                    for ii in i0..i1 {
                        for jj in j0..j1 {
                            acc = acc + src[ii * w + jj];
                        }
                    }
                    let area = T::from_f64(((i1 - i0) * (j1 - j0)) as f64);
                    dst[i * ow + j] = acc / area;
                }
            }
        }
        o
    });
    record_op(
        "adaptive_avg_pool",
        vec![x.clone()],
        vec![n, c, oh, ow],
        out,
        move |_, _, g| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for nc in 0..n * c {
                let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                let gdst = &mut gx[nc * h * w..(nc + 1) * h * w];
                for i in 0..oh {
                    let (i0, i1) = bounds(h, oh, i);
                    for j in 0..ow {
                        let (j0, j1) = bounds(w, ow, j);
                        let area = T::from_f64(((i1 - i0) * (j1 - j0)) as f64);
                        let gv = gsrc[i * ow + j] / area;
                        for ii in i0..i1 {
                            for jj in j0..j1 {
                                gdst[ii * w + jj] = gdst[ii * w + jj] + gv;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        },
    )
}

/// Mean over the channel axis, keeping it as size 1: N×C×H×W → N×1×H×W.
pub fn channel_mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_4d(x, "channel_mean input")?;
    let hw = h * w;
    let inv = T::from_f64(1.0 / c as f64);
    let out = x.with_data(|xd| {
        let mut o = vec![T::zero(); n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    o[ni * hw + p] = o[ni * hw + p] + xd[base + p];
                }
            }
        }
        for v in o.iter_mut() {
            *v = *v * inv;
        }
        o
    });
    record_op("channel_mean", vec![x.clone()], vec![n, 1, h, w], out, move |_, _, g| {
        let mut gx = vec![T::zero(); n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    gx[base + p] = g[ni * hw + p] * inv;
                }
            }
        }
        vec![Some(gx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_constant_channels_give_zero() {
        // All channels equal at every position: variance 0, eps clamps.
        let x = Tensor::<f64>::full(&[1, 3, 2, 2], 5.0);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let y = layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_channels_closed_form() {
        // Channels [1, 3]: mean 2, population std 1 -> [-1, 1] as eps -> 0.
        let x = Tensor::<f64>::from_vec(vec![1.0, 3.0], &[1, 2, 1, 1]).unwrap();
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let y = layer_norm(&x, &gamma, &beta, 1e-12).unwrap().data();
        assert!((y[0] + 1.0).abs() < 1e-5);
        assert!((y[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_zero_gamma_collapses_to_beta() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 3.0, -2.0, 0.5], &[1, 2, 1, 2]).unwrap();
        let gamma = Tensor::zeros(&[2]);
        let beta = Tensor::full(&[2], 0.7);
        let y = layer_norm(&x, &gamma, &beta, 1e-6).unwrap().data();
        for v in y {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_and_gsp_values() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 3.0, 5.0, 7.0], &[1, 1, 2, 2]).unwrap();
        assert_eq!(pool_stats(&x, PoolKind::Gap).unwrap().item(), 4.0);

        let c = Tensor::<f64>::full(&[1, 1, 3, 3], 2.5);
        assert_eq!(pool_stats(&c, PoolKind::Gsp).unwrap().item(), 0.0);

        // Population std of {1, 3} is 1.
        let x = Tensor::<f64>::from_vec(vec![1.0, 3.0], &[1, 1, 1, 2]).unwrap();
        assert!((pool_stats(&x, PoolKind::Gsp).unwrap().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn down2_and_up2() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 3.0, 5.0, 7.0], &[1, 1, 2, 2]).unwrap();
        let d = resample(&x, Resample::Down2).unwrap();
        assert_eq!(d.shape(), &[1, 1, 1, 1]);
        assert_eq!(d.item(), 4.0);

        let c = Tensor::<f64>::full(&[1, 2, 4, 4], 1.25);
        let d = resample(&c, Resample::Down2).unwrap();
        assert!(d.data().iter().all(|v| *v == 1.25));
        let u = resample(&d, Resample::Up2).unwrap();
        assert_eq!(u.shape(), &[1, 2, 4, 4]);
        assert!(u.data().iter().all(|v| *v == 1.25));

        let odd = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(resample(&odd, Resample::Down2).is_err());
    }

    #[test]
    fn adaptive_pool_identity_when_sizes_match() {
        let x = Tensor::<f64>::from_vec((0..9).map(|v| v as f64).collect(), &[1, 1, 3, 3]).unwrap();
        let y = adaptive_avg_pool(&x, 3, 3).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn channel_mean_averages() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2]).unwrap();
        let y = channel_mean(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), vec![2.0, 3.0]);
    }
}
