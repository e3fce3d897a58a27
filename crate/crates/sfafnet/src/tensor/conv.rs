//! 2-d convolution (cross-correlation convention, "same" padding) and the
//! dynamic per-sample filter application used for frequency decomposition.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{check_4d, record_op, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Mirror across the edge pixel (the edge itself is not repeated).
    Reflect,
}

/// Out-of-range coordinate folded back into [0, len) by reflection.
#[inline]
fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let m = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    debug_assert!(m >= 0 && m < n);
    m as usize
}

/// Pad one C×H×W block of planes to (h+2p)×(w+2p).
fn pad_planes<T: Scalar>(
    src: &[T],
    planes: usize,
    h: usize,
    w: usize,
    p: usize,
    padding: Padding,
) -> Vec<T> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); planes * hp * wp];
    for pl in 0..planes {
        let sp = &src[pl * h * w..(pl + 1) * h * w];
        let dp = &mut out[pl * hp * wp..(pl + 1) * hp * wp];
        for ih in 0..hp {
            let sh = ih as isize - p as isize;
            let srow = match padding {
                Padding::Zero => {
                    if sh < 0 || sh >= h as isize {
                        continue;
                    }
                    sh as usize
                }
                Padding::Reflect => reflect_index(sh, h),
            };
            for iw in 0..wp {
                let sw = iw as isize - p as isize;
                let scol = match padding {
                    Padding::Zero => {
                        if sw < 0 || sw >= w as isize {
                            continue;
                        }
                        sw as usize
                    }
                    Padding::Reflect => reflect_index(sw, w),
                };
                dp[ih * wp + iw] = sp[srow * w + scol];
            }
        }
    }
    out
}

/// Fold a padded-gradient block back onto the unpadded grid, accumulating
/// reflected border contributions into their source pixels.
fn unpad_planes<T: Scalar>(
    gpad: &[T],
    planes: usize,
    h: usize,
    w: usize,
    p: usize,
    padding: Padding,
) -> Vec<T> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let sp = &gpad[pl * hp * wp..(pl + 1) * hp * wp];
        let dp = &mut out[pl * h * w..(pl + 1) * h * w];
        for ih in 0..hp {
            let sh = ih as isize - p as isize;
            let srow = match padding {
                Padding::Zero => {
                    if sh < 0 || sh >= h as isize {
                        continue;
                    }
                    sh as usize
                }
                Padding::Reflect => reflect_index(sh, h),
            };
            for iw in 0..wp {
                let sw = iw as isize - p as isize;
                let scol = match padding {
                    Padding::Zero => {
                        if sw < 0 || sw >= w as isize {
                            continue;
                        }
                        sw as usize
                    }
                    Padding::Reflect => reflect_index(sw, w),
                };
                dp[srow * w + scol] = dp[srow * w + scol] + sp[ih * wp + iw];
            }
        }
    }
    out
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cpg: usize, // in-channels per group
    k: usize,
    p: usize,
    stride: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

fn conv_forward<T: Scalar>(padded: &[T], wd: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let (hp, wp) = (d.h + 2 * d.p, d.w + 2 * d.p);
    let cout_per_group = d.cout / d.groups;
    let mut out = vec![T::zero(); d.n * d.cout * d.oh * d.ow];
    out.par_chunks_mut(d.oh * d.ow).enumerate().for_each(|(idx, oplane)| {
        let ni = idx / d.cout;
        let co = idx % d.cout;
        let g = co / cout_per_group;
        if let Some(b) = bias {
            oplane.fill(b[co]);
        }
        for ci in 0..d.cpg {
            let iplane = &padded[((ni * d.cin) + g * d.cpg + ci) * hp * wp..][..hp * wp];
            let wk = &wd[(co * d.cpg + ci) * d.k * d.k..][..d.k * d.k];
            for kh in 0..d.k {
                for kw in 0..d.k {
                    let wv = wk[kh * d.k + kw];
                    for oh in 0..d.oh {
                        let srow = &iplane[(oh * d.stride + kh) * wp + kw..];
                        let orow = &mut oplane[oh * d.ow..(oh + 1) * d.ow];
                        if d.stride == 1 {
                            for (o, s) in orow.iter_mut().zip(srow.iter()) {
                                *o = *o + wv * *s;
                            }
                        } else {
                            for (ow, o) in orow.iter_mut().enumerate() {
                                *o = *o + wv * srow[ow * d.stride];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// 2-d convolution with "same" padding p=(k−1)/2, configurable stride,
/// padding mode and channel groups. Output spatial size is
/// floor((H + 2p − k)/stride) + 1.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
    groups: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = check_4d(input, "conv2d input")?;
    let (cout, cpg, kh, kw) = check_4d(weight, "conv2d kernel")?;
    if kh != kw {
        return Err(Error::dim(format!("conv2d kernel must be square, got {kh}x{kw}")));
    }
    let k = kh;
    if k % 2 == 0 {
        return Err(Error::dim(format!("conv2d kernel size must be odd, got {k}")));
    }
    if stride < 1 {
        return Err(Error::config("conv2d stride must be >= 1".to_string()));
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::config(format!(
            "conv2d groups {groups} must divide in-channels {cin} and out-channels {cout}"
        )));
    }
    if cpg != cin / groups {
        return Err(Error::dim(format!(
            "conv2d kernel expects {cpg} in-channels per group, input provides {}",
            cin / groups
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim(format!(
                "conv2d bias must have shape [{cout}], got {:?}",
                b.shape()
            )));
        }
    }
    let p = (k - 1) / 2;
    if padding == Padding::Reflect && p > 0 && (h < p + 1 || w < p + 1) {
        return Err(Error::dim(format!(
            "reflect padding {p} needs spatial size > {p}, got {h}x{w}"
        )));
    }
    if h + 2 * p < k || w + 2 * p < k {
        return Err(Error::dim(format!(
            "conv2d: {h}x{w} input too small for kernel {k}"
        )));
    }
    let dims = ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        cpg,
        k,
        p,
        stride,
        groups,
        oh: (h + 2 * p - k) / stride + 1,
        ow: (w + 2 * p - k) / stride + 1,
    };
    let (oh, ow) = (dims.oh, dims.ow);

    let padded = input.with_data(|xd| {
        if p == 0 {
            xd.to_vec()
        } else {
            pad_planes(xd, n * cin, h, w, p, padding)
        }
    });
    let out = weight.with_data(|wd| {
        conv_forward(&padded, wd, bias.map(|b| b.data()).as_deref(), &dims)
    });

    let mut inputs = vec![input.clone(), weight.clone()];
    let has_bias = bias.is_some();
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let need: Vec<bool> = inputs.iter().map(|t| t.connected()).collect();

    record_op("conv2d", inputs, vec![n, cout, oh, ow], out, move |ins, _, g| {
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let cout_per_group = cout / groups;
        let input = &ins[0];
        let weight = &ins[1];

        // The padded input is recomputed; cheaper than retaining it.
        let padded = (need[1] || need[0]).then(|| {
            input.with_data(|xd| {
                if p == 0 {
                    xd.to_vec()
                } else {
                    pad_planes(xd, n * cin, h, w, p, padding)
                }
            })
        });

        let gin = need[0].then(|| {
            weight.with_data(|wd| {
                let mut gpad = vec![T::zero(); n * cin * hp * wp];
                gpad.par_chunks_mut(cin * hp * wp).enumerate().for_each(|(ni, gp)| {
                    for co in 0..cout {
                        let grp = co / cout_per_group;
                        let gplane = &g[(ni * cout + co) * oh * ow..][..oh * ow];
                        for ci in 0..cpg {
                            let gpp = &mut gp[(grp * cpg + ci) * hp * wp..][..hp * wp];
                            let wk = &wd[(co * cpg + ci) * k * k..][..k * k];
                            for khi in 0..k {
                                for kwi in 0..k {
                                    let wv = wk[khi * k + kwi];
                                    for ohi in 0..oh {
                                        let grow = &gplane[ohi * ow..(ohi + 1) * ow];
                                        let base = (ohi * stride + khi) * wp + kwi;
                                        if stride == 1 {
                                            let drow = &mut gpp[base..base + ow];
                                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                                *dv = *dv + wv * *gv;
                                            }
                                        } else {
                                            for (owi, gv) in grow.iter().enumerate() {
                                                gpp[base + owi * stride] =
                                                    gpp[base + owi * stride] + wv * *gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                if p == 0 {
                    gpad
                } else {
                    unpad_planes(&gpad, n * cin, h, w, p, padding)
                }
            })
        });

        let gw = need[1].then(|| {
            let padded = padded.as_ref().expect("padded computed when needed");
            let mut gw = vec![T::zero(); cout * cpg * k * k];
            gw.par_chunks_mut(cpg * k * k).enumerate().for_each(|(co, gwc)| {
                let grp = co / cout_per_group;
                for ni in 0..n {
                    let gplane = &g[(ni * cout + co) * oh * ow..][..oh * ow];
                    for ci in 0..cpg {
                        let iplane = &padded[((ni * cin) + grp * cpg + ci) * hp * wp..][..hp * wp];
                        for khi in 0..k {
                            for kwi in 0..k {
                                let mut acc = T::zero();
                                for ohi in 0..oh {
                                    let grow = &gplane[ohi * ow..(ohi + 1) * ow];
                                    let srow = &iplane[(ohi * stride + khi) * wp + kwi..];
                                    if stride == 1 {
                                        for (gv, sv) in grow.iter().zip(srow.iter()) {
                                            acc = acc + *gv * *sv;
                                        }
                                    } else {
                                        for (owi, gv) in grow.iter().enumerate() {
                                            acc = acc + *gv * srow[owi * stride];
                                        }
                                    }
                                }
                                gwc[ci * k * k + khi * k + kwi] =
                                    gwc[ci * k * k + khi * k + kwi] + acc;
                            }
                        }
                    }
                }
            });
            gw
        });

        let gb = (has_bias && need[2]).then(|| {
            let mut gb = vec![T::zero(); cout];
            for ni in 0..n {
                for co in 0..cout {
                    let gplane = &g[(ni * cout + co) * oh * ow..][..oh * ow];
                    let mut acc = T::zero();
                    for v in gplane {
                        acc = acc + *v;
                    }
                    gb[co] = gb[co] + acc;
                }
            }
            gb
        });

        let mut grads = vec![gin, gw];
        if has_bias {
            grads.push(gb);
        }
        grads
    })
}

/// Apply per-sample, per-row-group k×k filters (reflect padding, stride 1).
/// `bank` has shape B×r×k×k with B ∈ {1, N}; channel c uses row group
/// c / (C/r). Differentiable in both the features and the bank.
pub fn filter_apply<T: Scalar>(input: &Tensor<T>, bank: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_4d(input, "filter_apply input")?;
    let (bn, r, kh, kw) = check_4d(bank, "filter bank")?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::dim(format!("filter bank kernels must be odd square, got {kh}x{kw}")));
    }
    let k = kh;
    if bn != 1 && bn != n {
        return Err(Error::dim(format!(
            "filter bank batch {bn} incompatible with input batch {n}"
        )));
    }
    if r == 0 || c % r != 0 {
        return Err(Error::dim(format!(
            "filter bank rows {r} must divide channel count {c}"
        )));
    }
    if h < k || w < k {
        return Err(Error::dim(format!(
            "filter_apply: input {h}x{w} smaller than kernel {k}"
        )));
    }
    let m = c / r;
    let p = (k - 1) / 2;
    let (hp, wp) = (h + 2 * p, w + 2 * p);

    let padded = input.with_data(|xd| pad_planes(xd, n * c, h, w, p, Padding::Reflect));
    let out = bank.with_data(|bd| {
        let mut out = vec![T::zero(); n * c * h * w];
        out.par_chunks_mut(h * w).enumerate().for_each(|(idx, oplane)| {
            let ni = idx / c;
            let ci = idx % c;
            let bi = if bn == 1 { 0 } else { ni };
            let wk = &bd[(bi * r + ci / m) * k * k..][..k * k];
            let iplane = &padded[idx * hp * wp..(idx + 1) * hp * wp];
            for khi in 0..k {
                for kwi in 0..k {
                    let wv = wk[khi * k + kwi];
                    for oh in 0..h {
                        let srow = &iplane[(oh + khi) * wp + kwi..][..w];
                        let orow = &mut oplane[oh * w..(oh + 1) * w];
                        for (o, s) in orow.iter_mut().zip(srow) {
                            *o = *o + wv * *s;
                        }
                    }
                }
            }
        });
        out
    });

    let need_in = input.connected();
    let need_bank = bank.connected();
    record_op(
        "filter_apply",
        vec![input.clone(), bank.clone()],
        vec![n, c, h, w],
        out,
        move |ins, _, g| {
            let (input, bank) = (&ins[0], &ins[1]);
            let padded = need_bank
                .then(|| input.with_data(|xd| pad_planes(xd, n * c, h, w, p, Padding::Reflect)));

            let gin = need_in.then(|| {
                bank.with_data(|bd| {
                    let mut gpad = vec![T::zero(); n * c * hp * wp];
                    gpad.par_chunks_mut(hp * wp).enumerate().for_each(|(idx, gp)| {
                        let ni = idx / c;
                        let ci = idx % c;
                        let bi = if bn == 1 { 0 } else { ni };
                        let wk = &bd[(bi * r + ci / m) * k * k..][..k * k];
                        let gplane = &g[idx * h * w..(idx + 1) * h * w];
                        for khi in 0..k {
                            for kwi in 0..k {
                                let wv = wk[khi * k + kwi];
                                for oh in 0..h {
                                    let grow = &gplane[oh * w..(oh + 1) * w];
                                    let drow = &mut gp[(oh + khi) * wp + kwi..][..w];
                                    for (d, gv) in drow.iter_mut().zip(grow) {
                                        *d = *d + wv * *gv;
                                    }
                                }
                            }
                        }
                    });
                    unpad_planes(&gpad, n * c, h, w, p, Padding::Reflect)
                })
            });

            let gbank = need_bank.then(|| {
                let padded = padded.as_ref().expect("padded retained for bank grad");
                let mut gb = vec![T::zero(); bn * r * k * k];
                gb.par_chunks_mut(k * k).enumerate().for_each(|(slot, gk)| {
                    let bi = slot / r;
                    let ri = slot % r;
                    // Banks with batch 1 aggregate over every sample.
                    let samples: Vec<usize> = if bn == 1 { (0..n).collect() } else { vec![bi] };
                    for ni in samples {
                        for cg in 0..m {
                            let ci = ri * m + cg;
                            let idx = ni * c + ci;
                            let gplane = &g[idx * h * w..(idx + 1) * h * w];
                            let iplane = &padded[idx * hp * wp..(idx + 1) * hp * wp];
                            for khi in 0..k {
                                for kwi in 0..k {
                                    let mut acc = T::zero();
                                    for oh in 0..h {
                                        let grow = &gplane[oh * w..(oh + 1) * w];
                                        let srow = &iplane[(oh + khi) * wp + kwi..][..w];
                                        for (gv, sv) in grow.iter().zip(srow) {
                                            acc = acc + *gv * *sv;
                                        }
                                    }
                                    gk[khi * k + kwi] = gk[khi * k + kwi] + acc;
                                }
                            }
                        }
                    }
                });
                gb
            });
            vec![gin, gbank]
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rand_uniform;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force convolution oracle: six nested loops, explicit padding.
    fn conv_oracle(
        x: &[f64],
        wgt: &[f64],
        bias: Option<&[f64]>,
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        groups: usize,
    ) -> Vec<f64> {
        let p = (k - 1) / 2;
        let oh = (h + 2 * p - k) / stride + 1;
        let ow = (w + 2 * p - k) / stride + 1;
        let cpg = cin / groups;
        let copg = cout / groups;
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                let g = co / copg;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..cpg {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (oi * stride + ki) as isize - p as isize;
                                    let iw = (oj * stride + kj) as isize - p as isize;
                                    let v = match padding {
                                        Padding::Zero => {
                                            if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize
                                            {
                                                0.0
                                            } else {
                                                x[((ni * cin + g * cpg + ci) * h
                                                    + ih as usize)
                                                    * w
                                                    + iw as usize]
                                            }
                                        }
                                        Padding::Reflect => {
                                            let ih = reflect_index(ih, h);
                                            let iw = reflect_index(iw, w);
                                            x[((ni * cin + g * cpg + ci) * h + ih) * w + iw]
                                        }
                                    };
                                    acc += v * wgt[((co * cpg + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((ni * cout + co) * oh + oi) * ow + oj] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_uniform::<f64, _>(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let mut kd = vec![0.0; 2 * 3 * 3];
        kd[4] = 1.0; // center of channel 0
        kd[9 + 4] = 1.0; // center of channel 1, depthwise layout 2x1x3x3
        let kernel = Tensor::from_vec(kd, &[2, 1, 3, 3]).unwrap();
        let y = conv2d(&x, &kernel, None, 1, Padding::Zero, 2).unwrap();
        let (xd, yd) = (x.data(), y.data());
        for (a, b) in xd.iter().zip(&yd) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn box_kernel_preserves_constants_under_reflect() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 6], 0.37);
        let kernel = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&x, &kernel, None, 1, Padding::Reflect, 1).unwrap();
        for v in y.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_uniform::<f64, _>(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let wgt = rand_uniform::<f64, _>(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_uniform::<f64, _>(&mut rng, &[3], -1.0, 1.0);
        for padding in [Padding::Zero, Padding::Reflect] {
            let y = conv2d(&x, &wgt, Some(&b), 1, padding, 1).unwrap();
            let want = conv_oracle(
                &x.data(),
                &wgt.data(),
                Some(&b.data()),
                1,
                2,
                4,
                4,
                3,
                3,
                1,
                padding,
                1,
            );
            for (a, o) in y.data().iter().zip(&want) {
                assert!((a - o).abs() < 1e-6, "conv mismatch {a} vs {o} ({padding:?})");
            }
        }
    }

    #[test]
    fn strided_and_grouped_conv_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_uniform::<f64, _>(&mut rng, &[2, 4, 6, 6], -1.0, 1.0);
        let wgt = rand_uniform::<f64, _>(&mut rng, &[6, 2, 3, 3], -1.0, 1.0);
        let y = conv2d(&x, &wgt, None, 2, Padding::Zero, 2).unwrap();
        assert_eq!(y.shape(), &[2, 6, 3, 3]);
        let want = conv_oracle(&x.data(), &wgt.data(), None, 2, 4, 6, 6, 6, 3, 2, Padding::Zero, 2);
        for (a, o) in y.data().iter().zip(&want) {
            assert!((a - o).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_uniform::<f64, _>(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
        let y = rand_uniform::<f64, _>(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
        let wgt = rand_uniform::<f64, _>(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        let (a, b) = (0.7, -1.3);
        let lhs = {
            let ax = crate::tensor::ops::scale(&x, a).unwrap();
            let by = crate::tensor::ops::scale(&y, b).unwrap();
            let s = crate::tensor::ops::add(&ax, &by).unwrap();
            conv2d(&s, &wgt, None, 1, Padding::Zero, 1).unwrap().data()
        };
        let rhs = {
            let cx = conv2d(&x, &wgt, None, 1, Padding::Zero, 1).unwrap();
            let cy = conv2d(&y, &wgt, None, 1, Padding::Zero, 1).unwrap();
            let sx = crate::tensor::ops::scale(&cx, a).unwrap();
            let sy = crate::tensor::ops::scale(&cy, b).unwrap();
            crate::tensor::ops::add(&sx, &sy).unwrap().data()
        };
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_rejects_bad_configs() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let wgt = Tensor::<f64>::zeros(&[2, 3, 3, 3]);
        assert!(conv2d(&x, &wgt, None, 1, Padding::Zero, 2).is_err()); // groups don't divide
        let wgt = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        assert!(conv2d(&x, &wgt, None, 1, Padding::Zero, 1).is_err()); // cpg mismatch
    }

    #[test]
    fn filter_apply_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_uniform::<f64, _>(&mut rng, &[2, 4, 5, 5], -1.0, 1.0);
        let bank = rand_uniform::<f64, _>(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let y = filter_apply(&x, &bank).unwrap();

        let (xd, bd, yd) = (x.data(), bank.data(), y.data());
        for ni in 0..2 {
            for ci in 0..4 {
                let grp = ci / 2;
                for oi in 0..5 {
                    for oj in 0..5 {
                        let mut acc = 0.0;
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = reflect_index(oi as isize + ki as isize - 1, 5);
                                let iw = reflect_index(oj as isize + kj as isize - 1, 5);
                                acc += xd[((ni * 4 + ci) * 5 + ih) * 5 + iw]
                                    * bd[((ni * 2 + grp) * 3 + ki) * 3 + kj];
                            }
                        }
                        let got = yd[((ni * 4 + ci) * 5 + oi) * 5 + oj];
                        assert!((got - acc).abs() < 1e-6, "filter mismatch {got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn filter_apply_shared_bank_broadcasts_over_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_uniform::<f64, _>(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
        let bank = rand_uniform::<f64, _>(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let y = filter_apply(&x, &bank).unwrap();
        assert_eq!(y.shape(), &[3, 2, 4, 4]);
    }
}
