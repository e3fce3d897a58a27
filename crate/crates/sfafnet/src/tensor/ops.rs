//! Pointwise, shape and reduction ops plus matmul and softmax, each with
//! its backward rule.

use crate::error::{Error, Result};
use crate::tensor::{record_op, Scalar, Tensor};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let out = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(p, q)| *p + *q).collect()));
    record_op("add", vec![a.clone(), b.clone()], a.shape().to_vec(), out, |_, _, g| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    })
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "sub")?;
    let out = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(p, q)| *p - *q).collect()));
    record_op("sub", vec![a.clone(), b.clone()], a.shape().to_vec(), out, |_, _, g| {
        vec![
            Some(g.to_vec()),
            Some(g.iter().map(|v| -*v).collect()),
        ]
    })
}

pub fn neg<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let out = a.with_data(|x| x.iter().map(|v| -*v).collect());
    record_op("neg", vec![a.clone()], a.shape().to_vec(), out, |_, _, g| {
        vec![Some(g.iter().map(|v| -*v).collect())]
    })
}

/// Elementwise product of same-shape tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let out = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(p, q)| *p * *q).collect()));
    record_op("mul", vec![a.clone(), b.clone()], a.shape().to_vec(), out, |ins, _, g| {
        let ga = ins[1].with_data(|y| g.iter().zip(y).map(|(gi, q)| *gi * *q).collect());
        let gb = ins[0].with_data(|x| g.iter().zip(x).map(|(gi, p)| *gi * *p).collect());
        vec![Some(ga), Some(gb)]
    })
}

/// Broadcast product: `x` is N×C×H×W, `coef` is either N×C×1×1 (broadcast
/// over space) or N×1×H×W (broadcast over channels).
pub fn mul_bc<T: Scalar>(x: &Tensor<T>, coef: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape().to_vec();
    let cs = coef.shape().to_vec();
    if xs.len() != 4 || cs.len() != 4 || xs[0] != cs[0] {
        return Err(Error::dim(format!(
            "mul_bc: need 4-d operands with equal batch, got {xs:?} vs {cs:?}"
        )));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let spatial_bc = cs == [n, c, 1, 1];
    let channel_bc = cs == [n, 1, h, w];
    if !spatial_bc && !channel_bc {
        return Err(Error::dim(format!(
            "mul_bc: coef {cs:?} does not broadcast over {xs:?}"
        )));
    }
    let hw = h * w;
    let out = x.with_data(|xd| {
        coef.with_data(|cd| {
            let mut o = vec![T::zero(); xd.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    if spatial_bc {
                        let k = cd[ni * c + ci];
                        for p in 0..hw {
                            o[base + p] = xd[base + p] * k;
                        }
                    } else {
                        let cbase = ni * hw;
                        for p in 0..hw {
                            o[base + p] = xd[base + p] * cd[cbase + p];
                        }
                    }
                }
            }
            o
        })
    });
    record_op("mul_bc", vec![x.clone(), coef.clone()], xs.clone(), out, move |ins, _, g| {
        let (x, coef) = (&ins[0], &ins[1]);
        let gx = coef.with_data(|cd| {
            let mut o = vec![T::zero(); g.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    if spatial_bc {
                        let k = cd[ni * c + ci];
                        for p in 0..hw {
                            o[base + p] = g[base + p] * k;
                        }
                    } else {
                        let cbase = ni * hw;
                        for p in 0..hw {
                            o[base + p] = g[base + p] * cd[cbase + p];
                        }
                    }
                }
            }
            o
        });
        let gc = x.with_data(|xd| {
            if spatial_bc {
                let mut o = vec![T::zero(); n * c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let mut acc = T::zero();
                        for p in 0..hw {
                            acc = acc + g[base + p] * xd[base + p];
                        }
                        o[ni * c + ci] = acc;
                    }
                }
                o
            } else {
                let mut o = vec![T::zero(); n * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for p in 0..hw {
                            o[ni * hw + p] = o[ni * hw + p] + g[base + p] * xd[base + p];
                        }
                    }
                }
                o
            }
        });
        vec![Some(gx), Some(gc)]
    })
}

pub fn scale<T: Scalar>(a: &Tensor<T>, k: f64) -> Result<Tensor<T>> {
    let kk = T::from_f64(k);
    let out = a.with_data(|x| x.iter().map(|v| *v * kk).collect());
    record_op("scale", vec![a.clone()], a.shape().to_vec(), out, move |_, _, g| {
        vec![Some(g.iter().map(|v| *v * kk).collect())]
    })
}

pub fn add_scalar<T: Scalar>(a: &Tensor<T>, k: f64) -> Result<Tensor<T>> {
    let kk = T::from_f64(k);
    let out = a.with_data(|x| x.iter().map(|v| *v + kk).collect());
    record_op("add_scalar", vec![a.clone()], a.shape().to_vec(), out, |_, _, g| {
        vec![Some(g.to_vec())]
    })
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let one = T::one();
    let out = a.with_data(|x| {
        x.iter()
            .map(|v| one / (one + (-*v).exp()))
            .collect::<Vec<T>>()
    });
    record_op("sigmoid", vec![a.clone()], a.shape().to_vec(), out, move |_, y, g| {
        let gx = y
            .iter()
            .zip(g)
            .map(|(yi, gi)| *gi * *yi * (one - *yi))
            .collect();
        vec![Some(gx)]
    })
}

pub fn sqrt<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let out = a.with_data(|x| x.iter().map(|v| v.sqrt()).collect::<Vec<T>>());
    let half = T::from_f64(0.5);
    record_op("sqrt", vec![a.clone()], a.shape().to_vec(), out, move |_, y, g| {
        let gx = y.iter().zip(g).map(|(yi, gi)| *gi * half / *yi).collect();
        vec![Some(gx)]
    })
}

/// Sum of all elements, as a scalar tensor.
pub fn sum<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let s = a.with_data(|x| x.iter().fold(T::zero(), |acc, v| acc + *v));
    let n = a.numel();
    record_op("sum", vec![a.clone()], vec![1], vec![s], move |_, _, g| {
        vec![Some(vec![g[0]; n])]
    })
}

/// Mean of all elements, as a scalar tensor.
pub fn mean<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let n = a.numel();
    if n == 0 {
        return Err(Error::dim("mean of empty tensor".to_string()));
    }
    let inv = T::from_f64(1.0 / n as f64);
    let s = a.with_data(|x| x.iter().fold(T::zero(), |acc, v| acc + *v)) * inv;
    record_op("mean", vec![a.clone()], vec![1], vec![s], move |_, _, g| {
        vec![Some(vec![g[0] * inv; n])]
    })
}

/// Concatenate along `axis`. All other dimensions must agree.
pub fn concat<T: Scalar>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::dim("concat of zero tensors".to_string()));
    }
    let ndim = parts[0].ndim();
    if axis >= ndim {
        return Err(Error::dim(format!("concat axis {axis} out of range for ndim {ndim}")));
    }
    let mut out_shape = parts[0].shape().to_vec();
    let mut axis_total = 0;
    for p in parts {
        if p.ndim() != ndim {
            return Err(Error::dim("concat rank mismatch".to_string()));
        }
        for (d, (&a, &b)) in out_shape.iter().zip(p.shape()).enumerate() {
            if d != axis && a != b {
                return Err(Error::dim(format!(
                    "concat: shapes {:?} and {:?} differ off-axis",
                    parts[0].shape(),
                    p.shape()
                )));
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * axis_total * inner];
    let mut offsets = Vec::with_capacity(parts.len());
    let mut off = 0;
    for p in parts {
        offsets.push(off);
        let alen = p.shape()[axis];
        p.with_data(|d| {
            for o in 0..outer {
                let src = &d[o * alen * inner..(o + 1) * alen * inner];
                let dst_base = (o * axis_total + off) * inner;
                out[dst_base..dst_base + alen * inner].copy_from_slice(src);
            }
        });
        off += alen;
    }
    let part_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    record_op("concat", parts.to_vec(), out_shape, out, move |_, _, g| {
        let mut grads = Vec::with_capacity(part_lens.len());
        for (pi, &alen) in part_lens.iter().enumerate() {
            let off = offsets[pi];
            let mut gp = vec![T::zero(); outer * alen * inner];
            for o in 0..outer {
                let src_base = (o * axis_total + off) * inner;
                gp[o * alen * inner..(o + 1) * alen * inner]
                    .copy_from_slice(&g[src_base..src_base + alen * inner]);
            }
            grads.push(Some(gp));
        }
        grads
    })
}

/// Split into `parts` equal slices along `axis`.
pub fn split<T: Scalar>(a: &Tensor<T>, axis: usize, parts: usize) -> Result<Vec<Tensor<T>>> {
    let ndim = a.ndim();
    if axis >= ndim {
        return Err(Error::dim(format!("split axis {axis} out of range for ndim {ndim}")));
    }
    let alen = a.shape()[axis];
    if parts == 0 || alen % parts != 0 {
        return Err(Error::dim(format!(
            "split: {parts} parts do not divide axis length {alen}"
        )));
    }
    let plen = alen / parts;
    let mut out_shape = a.shape().to_vec();
    out_shape[axis] = plen;
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();

    let mut result = Vec::with_capacity(parts);
    for pi in 0..parts {
        let off = pi * plen;
        let data = a.with_data(|d| {
            let mut buf = vec![T::zero(); outer * plen * inner];
            for o in 0..outer {
                let src_base = (o * alen + off) * inner;
                buf[o * plen * inner..(o + 1) * plen * inner]
                    .copy_from_slice(&d[src_base..src_base + plen * inner]);
            }
            buf
        });
        let total = a.numel();
        let t = record_op("split", vec![a.clone()], out_shape.clone(), data, move |_, _, g| {
            // Scatter this part's gradient back into a full-size buffer.
            let mut gp = vec![T::zero(); total];
            for o in 0..outer {
                let dst_base = (o * alen + off) * inner;
                gp[dst_base..dst_base + plen * inner]
                    .copy_from_slice(&g[o * plen * inner..(o + 1) * plen * inner]);
            }
            vec![Some(gp)]
        })?;
        result.push(t);
    }
    Ok(result)
}

/// Reinterpret the buffer with a new shape of equal element count.
pub fn reshape<T: Scalar>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if numel != a.numel() {
        return Err(Error::dim(format!(
            "reshape: {:?} has {} elements, target {:?} has {}",
            a.shape(),
            a.numel(),
            shape,
            numel
        )));
    }
    let data = a.data();
    record_op("reshape", vec![a.clone()], shape.to_vec(), data, |_, _, g| {
        vec![Some(g.to_vec())]
    })
}

fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        ([m, k1], [k2, p]) if k1 == k2 => Ok((1, *m, *k1, *p)),
        ([n1, m, k1], [n2, k2, p]) if n1 == n2 && k1 == k2 => Ok((*n1, *m, *k1, *p)),
        (sa, sb) => Err(Error::dim(format!(
            "matmul: incompatible shapes {sa:?} and {sb:?}"
        ))),
    }
}

fn matmul_raw<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    p: usize,
    transpose_a: bool,
    transpose_b: bool,
) -> Vec<T> {
    // out[n, i, j] = sum_l A[n, i, l] * B[n, l, j], with optional transposes
    // applied to the operand index math (A is m×k, B is k×p after transpose).
    let mut out = vec![T::zero(); batch * m * p];
    for n in 0..batch {
        let ab = n * m * k;
        let bb = n * k * p;
        let ob = n * m * p;
        for i in 0..m {
            let orow = &mut out[ob + i * p..ob + (i + 1) * p];
            for l in 0..k {
                let av = if transpose_a {
                    a[ab + l * m + i]
                } else {
                    a[ab + i * k + l]
                };
                if transpose_b {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o = *o + av * b[bb + j * k + l];
                    }
                } else {
                    let brow = &b[bb + l * p..bb + (l + 1) * p];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o = *o + av * *bv;
                    }
                }
            }
        }
    }
    out
}

/// Matrix product: 2-d a×b @ b×c, or batched 3-d n×a×b @ n×b×c.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, p) = matmul_dims(a, b)?;
    let out = a.with_data(|ad| b.with_data(|bd| matmul_raw(ad, bd, batch, m, k, p, false, false)));
    let out_shape = if a.ndim() == 2 {
        vec![m, p]
    } else {
        vec![batch, m, p]
    };
    record_op("matmul", vec![a.clone(), b.clone()], out_shape, out, move |ins, _, g| {
        // dA = G @ B^T, dB = A^T @ G
        let ga = ins[1].with_data(|bd| matmul_raw(g, bd, batch, m, p, k, false, true));
        let gb = ins[0].with_data(|ad| matmul_raw(ad, g, batch, k, m, p, true, false));
        vec![Some(ga), Some(gb)]
    })
}

/// Swap the last two axes of a 2-d or 3-d tensor.
pub fn transpose_last2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, r, c) = match a.shape() {
        [r, c] => (1, *r, *c),
        [n, r, c] => (*n, *r, *c),
        s => return Err(Error::dim(format!("transpose needs 2-d or 3-d tensor, got {s:?}"))),
    };
    let transpose = move |src: &[T], rows: usize, cols: usize| {
        let mut out = vec![T::zero(); src.len()];
        for n in 0..batch {
            let base = n * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = src[base + i * cols + j];
                }
            }
        }
        out
    };
    let out = a.with_data(|d| transpose(d, r, c));
    let mut out_shape = a.shape().to_vec();
    let nd = out_shape.len();
    out_shape.swap(nd - 1, nd - 2);
    record_op("transpose", vec![a.clone()], out_shape, out, move |_, _, g| {
        vec![Some(transpose(g, c, r))]
    })
}

/// Numerically stable softmax along `axis`: rows are shifted by their max
/// before exponentiation.
pub fn softmax<T: Scalar>(a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let ndim = a.ndim();
    if axis >= ndim {
        return Err(Error::dim(format!("softmax axis {axis} out of range for ndim {ndim}")));
    }
    let alen = a.shape()[axis];
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let out = a.with_data(|d| {
        let mut o = vec![T::zero(); d.len()];
        for ou in 0..outer {
            for ii in 0..inner {
                let idx = |j: usize| (ou * alen + j) * inner + ii;
                let mut mx = d[idx(0)];
                for j in 1..alen {
                    if d[idx(j)] > mx {
                        mx = d[idx(j)];
                    }
                }
                let mut denom = T::zero();
                for j in 0..alen {
                    let e = (d[idx(j)] - mx).exp();
                    o[idx(j)] = e;
                    denom = denom + e;
                }
                for j in 0..alen {
                    o[idx(j)] = o[idx(j)] / denom;
                }
            }
        }
        o
    });
    record_op("softmax", vec![a.clone()], a.shape().to_vec(), out, move |_, y, g| {
        let mut gx = vec![T::zero(); g.len()];
        for ou in 0..outer {
            for ii in 0..inner {
                let idx = |j: usize| (ou * alen + j) * inner + ii;
                let mut dot = T::zero();
                for j in 0..alen {
                    dot = dot + g[idx(j)] * y[idx(j)];
                }
                for j in 0..alen {
                    gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                }
            }
        }
        vec![Some(gx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor_from(v: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(v, shape).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = tensor_from(vec![0.0], &[1]);
        assert_eq!(sigmoid(&x).unwrap().item(), 0.5);
    }

    #[test]
    fn split_concat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..2 * 6 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tensor_from(data.clone(), &[2, 6, 3, 3]);
        let parts = split(&x, 1, 3).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0].shape(), &[2, 2, 3, 3]);
        let back = concat(&parts, 1).unwrap();
        assert_eq!(back.data(), data);

        // concat then split is also the identity
        let joined = concat(&[parts[0].clone(), parts[1].clone()], 1).unwrap();
        let again = split(&joined, 1, 2).unwrap();
        assert_eq!(again[0].data(), parts[0].data());
        assert_eq!(again[1].data(), parts[1].data());
    }

    #[test]
    fn split_rejects_uneven_parts() {
        let x = Tensor::<f64>::zeros(&[1, 5, 2, 2]);
        assert!(split(&x, 1, 3).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a_data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = tensor_from(a_data.clone(), &[2, 3]);
        let b = tensor_from(b_data.clone(), &[3, 2]);
        let got = matmul(&a, &b).unwrap().data();

        let mut want = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for l in 0..3 {
                    want[i * 2 + j] += a_data[i * 3 + l] * b_data[l * 2 + j];
                }
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "matmul mismatch: {g} vs {w}");
        }
    }

    #[test]
    fn softmax_uniform_and_shifted() {
        let x = tensor_from(vec![0.0, 0.0, 0.0], &[3]);
        let y = softmax(&x, 0).unwrap().data();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x = tensor_from(vec![0.0, 3.0f64.ln()], &[2]);
        let y = softmax(&x, 0).unwrap().data();
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);

        // Large logits must not overflow thanks to the max shift.
        let x = tensor_from(vec![0.0, 100.0], &[2]);
        let y = softmax(&x, 0).unwrap().data();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!(y[1] > 1.0 - 1e-12);
    }

    #[test]
    fn softmax_rows_nonnegative_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let x = tensor_from(data, &[3, 4]);
            let y = softmax(&x, 1).unwrap().data();
            assert!(y.iter().all(|v| *v >= 0.0));
            for r in 0..3 {
                let s: f64 = y[r * 4..(r + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transpose_swaps_axes() {
        let x = tensor_from(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let t = transpose_last2(&x).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn mul_bc_broadcasts_both_ways() {
        let x = tensor_from((1..=8).map(|v| v as f64).collect(), &[1, 2, 2, 2]);
        let coef = tensor_from(vec![2.0, 10.0], &[1, 2, 1, 1]);
        let y = mul_bc(&x, &coef).unwrap().data();
        assert_eq!(y, vec![2.0, 4.0, 6.0, 8.0, 50.0, 60.0, 70.0, 80.0]);

        let w = tensor_from(vec![1.0, 0.0, 0.0, 1.0], &[1, 1, 2, 2]);
        let y = mul_bc(&x, &w).unwrap().data();
        assert_eq!(y, vec![1.0, 0.0, 0.0, 4.0, 5.0, 0.0, 0.0, 8.0]);
    }
}
