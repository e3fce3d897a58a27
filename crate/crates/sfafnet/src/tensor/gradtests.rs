//! Finite-difference checks for every differentiable op, run in f64.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::ops;
use crate::tensor::{
    adaptive_avg_pool, channel_mean, conv2d, filter_apply, gradcheck, layer_norm, pool_stats,
    rand_uniform, resample, Padding, PoolKind, Resample, Tensor,
};

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| rand_uniform::<f64, _>(&mut rng, s, -1.0, 1.0).requires_grad(true))
        .collect()
}

fn check(f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>, ins: &[Tensor<f64>]) {
    let report = gradcheck(&f, ins, H, 24, 99).unwrap();
    assert!(
        report.passes(TOL),
        "gradcheck failed: max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn grad_conv2d_zero_padding() {
    let ins = inputs(1, &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]]);
    check(
        |t| ops::sum(&conv2d(&t[0], &t[1], Some(&t[2]), 1, Padding::Zero, 1)?),
        &ins,
    );
}

#[test]
fn grad_conv2d_reflect_strided_grouped() {
    let ins = inputs(2, &[&[1, 4, 6, 6], &[4, 2, 3, 3], &[4]]);
    check(
        |t| ops::sum(&conv2d(&t[0], &t[1], Some(&t[2]), 2, Padding::Reflect, 2)?),
        &ins,
    );
}

#[test]
fn grad_conv2d_pointwise() {
    let ins = inputs(3, &[&[2, 4, 3, 3], &[5, 4, 1, 1], &[5]]);
    // Square the output so the weight gradient depends on the input values.
    check(
        |t| {
            let y = conv2d(&t[0], &t[1], Some(&t[2]), 1, Padding::Zero, 1)?;
            ops::sum(&ops::mul(&y, &y)?)
        },
        &ins,
    );
}

#[test]
fn grad_filter_apply_input_and_bank() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_uniform::<f64, _>(&mut rng, &[2, 4, 5, 5], -1.0, 1.0).requires_grad(true);
    let bank = rand_uniform::<f64, _>(&mut rng, &[2, 2, 3, 3], -1.0, 1.0).requires_grad(true);
    check(
        |t| {
            let y = filter_apply(&t[0], &t[1])?;
            ops::sum(&ops::mul(&y, &y)?)
        },
        &[x, bank],
    );
}

#[test]
fn grad_filter_apply_shared_bank() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_uniform::<f64, _>(&mut rng, &[3, 2, 4, 4], -1.0, 1.0).requires_grad(true);
    let bank = rand_uniform::<f64, _>(&mut rng, &[1, 2, 3, 3], -1.0, 1.0).requires_grad(true);
    check(
        |t| {
            let y = filter_apply(&t[0], &t[1])?;
            ops::sum(&ops::mul(&y, &y)?)
        },
        &[x, bank],
    );
}

#[test]
fn grad_layer_norm() {
    let ins = inputs(6, &[&[2, 3, 4, 4], &[3], &[3]]);
    check(
        |t| {
            let y = layer_norm(&t[0], &t[1], &t[2], 1e-6)?;
            ops::sum(&ops::mul(&y, &y)?)
        },
        &ins,
    );
}

#[test]
fn grad_softmax() {
    let ins = inputs(7, &[&[2, 5, 3]]);
    check(
        |t| {
            let y = ops::softmax(&t[0], 1)?;
            let w = rand_uniform::<f64, _>(&mut ChaCha8Rng::seed_from_u64(70), &[2, 5, 3], -1.0, 1.0);
            ops::sum(&ops::mul(&y, &w)?)
        },
        &ins,
    );
}

#[test]
fn grad_pools() {
    let ins = inputs(8, &[&[2, 3, 4, 4]]);
    check(
        |t| {
            let g = pool_stats(&t[0], PoolKind::Gap)?;
            let s = pool_stats(&t[0], PoolKind::Gsp)?;
            ops::sum(&ops::mul(&ops::add(&g, &s)?, &g)?)
        },
        &ins,
    );
}

#[test]
fn grad_resample_both_ways() {
    let ins = inputs(9, &[&[1, 2, 4, 4]]);
    check(
        |t| {
            let d = resample(&t[0], Resample::Down2)?;
            let u = resample(&d, Resample::Up2)?;
            ops::sum(&ops::mul(&u, &u)?)
        },
        &ins,
    );
}

#[test]
fn grad_adaptive_pool_and_channel_mean() {
    let ins = inputs(10, &[&[2, 4, 7, 5]]);
    check(
        |t| {
            let p = adaptive_avg_pool(&t[0], 3, 3)?;
            let m = channel_mean(&p)?;
            ops::sum(&ops::mul(&m, &m)?)
        },
        &ins,
    );
}

#[test]
fn grad_matmul_transpose_chain() {
    let ins = inputs(11, &[&[2, 3, 4], &[2, 3, 4]]);
    check(
        |t| {
            let s = ops::matmul(&t[0], &ops::transpose_last2(&t[1])?)?;
            let a = ops::softmax(&s, 2)?;
            let y = ops::matmul(&a, &t[1])?;
            ops::sum(&ops::mul(&y, &y)?)
        },
        &ins,
    );
}

#[test]
fn grad_mul_bc_spatial_and_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_uniform::<f64, _>(&mut rng, &[2, 3, 3, 3], -1.0, 1.0).requires_grad(true);
    let cs = rand_uniform::<f64, _>(&mut rng, &[2, 3, 1, 1], -1.0, 1.0).requires_grad(true);
    let cw = rand_uniform::<f64, _>(&mut rng, &[2, 1, 3, 3], -1.0, 1.0).requires_grad(true);
    check(
        |t| {
            let a = ops::mul_bc(&t[0], &t[1])?;
            let b = ops::mul_bc(&a, &t[2])?;
            ops::sum(&ops::mul(&b, &b)?)
        },
        &[x, cs, cw],
    );
}

#[test]
fn grad_pointwise_chain() {
    let ins = inputs(13, &[&[3, 4], &[3, 4]]);
    check(
        |t| {
            let s = ops::sigmoid(&t[0])?;
            let d = ops::sub(&s, &t[1])?;
            let q = ops::add_scalar(&ops::mul(&d, &d)?, 0.3)?;
            let r = ops::sqrt(&q)?;
            let n = ops::neg(&ops::scale(&r, 0.7)?)?;
            ops::mean(&n)
        },
        &ins,
    );
}

#[test]
fn grad_concat_split_reshape() {
    let ins = inputs(14, &[&[1, 2, 2, 2], &[1, 4, 2, 2]]);
    check(
        |t| {
            let parts = ops::split(&t[1], 1, 2)?;
            let joined = ops::concat(&[t[0].clone(), parts[0].clone(), parts[1].clone()], 1)?;
            let flat = ops::reshape(&joined, &[1, 6, 4])?;
            ops::sum(&ops::mul(&flat, &flat)?)
        },
        &ins,
    );
}
