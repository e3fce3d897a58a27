//! Frequency-domain information dynamic generation module: learns one
//! low-pass kernel per channel row group, derives the high-pass
//! complement, splits features into the two subbands, and numerically
//! certifies the low-pass property of row-stochastic kernels.

use rand::Rng;

use crate::blocks::{Conv2d, Init};
use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{
    adaptive_avg_pool, channel_mean, filter_apply, pool_stats, Padding, PoolKind, Scalar, Tensor,
};

/// Per-row-group kernel pairs. `low` holds nonnegative unit-sum kernels,
/// `high` their complements against the identity kernel. Shapes are
/// B×r×k×k with B = 1 (shared) or the batch size (per-sample).
pub struct FilterBank<T: Scalar> {
    pub low: Tensor<T>,
    pub high: Tensor<T>,
    pub rows: usize,
    pub kernel: usize,
}

/// Identity kernel: 1 at the center, 0 elsewhere.
pub fn identity_kernel<T: Scalar>(k: usize) -> Vec<T> {
    let mut v = vec![T::zero(); k * k];
    v[(k / 2) * k + k / 2] = T::one();
    v
}

/// High-pass complement of a single validated low-pass kernel.
pub fn high_pass_from_low<T: Scalar>(low: &[T], k: usize) -> Result<Vec<T>> {
    if low.len() != k * k {
        return Err(Error::dim(format!(
            "low-pass kernel has {} entries, expected {}",
            low.len(),
            k * k
        )));
    }
    let mut sum = T::zero();
    for v in low {
        if *v < T::zero() {
            return Err(Error::contract(format!("low-pass kernel entry {v} is negative")));
        }
        sum += *v;
    }
    if (sum.as_f64() - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!(
            "low-pass kernel entries sum to {sum}, expected 1"
        )));
    }
    Ok(identity_kernel::<T>(k)
        .iter()
        .zip(low)
        .map(|(i, l)| *i - *l)
        .collect())
}

/// The learnable filter generator: two projection convolutions plus the
/// row/kernel-size configuration.
pub struct Fdgm<T: Scalar> {
    pub expand: Conv2d<T>,
    pub dw: Conv2d<T>,
    pub rows: usize,
    pub kernel: usize,
}

impl<T: Scalar> Fdgm<T> {
    pub fn new<R: Rng>(rng: &mut R, channels: usize, rows: usize, kernel: usize) -> Result<Self> {
        if rows == 0 || channels % rows != 0 {
            return Err(Error::config(format!(
                "FDGM rows {rows} must divide channel count {channels}"
            )));
        }
        if kernel % 2 == 0 {
            return Err(Error::config(format!("FDGM kernel size must be odd, got {kernel}")));
        }
        Ok(Fdgm {
            expand: Conv2d::new(rng, channels, 3 * channels, 1, 1, Padding::Zero, 1, Init::FanIn),
            dw: Conv2d::new(
                rng,
                3 * channels,
                3 * channels,
                3,
                1,
                Padding::Reflect,
                3 * channels,
                Init::FanIn,
            ),
            rows,
            kernel,
        })
    }

    /// Produce the per-sample filter bank and the third projection that the
    /// bank decomposes. Per row group: the first projection is pooled to a
    /// k×k spatial template, the second to a global scalar that modulates
    /// it; a row-wise softmax turns the logits into a low-pass kernel.
    pub fn generate(&self, f: &Tensor<T>) -> Result<(FilterBank<T>, Tensor<T>)> {
        let s = f.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("FDGM input must be 4-d, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (r, k) = (self.rows, self.kernel);
        if c % r != 0 {
            return Err(Error::config(format!(
                "FDGM input channels {c} not divisible by rows {r}"
            )));
        }
        if h < k || w < k {
            return Err(Error::dim(format!(
                "FDGM input {h}x{w} smaller than filter kernel {k}"
            )));
        }
        let projected = self.dw.forward(&self.expand.forward(f)?)?;
        let thirds = ops::split(&projected, 1, 3)?;
        let (f1, f2, f3) = (&thirds[0], &thirds[1], &thirds[2]);

        let f1_groups = ops::split(f1, 1, r)?;
        let f2_groups = ops::split(f2, 1, r)?;
        let mut rows_flat = Vec::with_capacity(r);
        for g in 0..r {
            let template = channel_mean(&adaptive_avg_pool(&f1_groups[g], k, k)?)?;
            let scale = ops::add_scalar(
                &channel_mean(&pool_stats(&f2_groups[g], PoolKind::Gap)?)?,
                1.0,
            )?;
            let logits = ops::reshape(&ops::mul_bc(&template, &scale)?, &[n, 1, k * k])?;
            rows_flat.push(ops::softmax(&logits, 2)?);
        }
        let low = ops::reshape(&ops::concat(&rows_flat, 1)?, &[n, r, k, k])?;
        let ident = Tensor::from_vec(identity_kernel::<T>(k).repeat(n * r), &[n, r, k, k])?;
        let high = ops::sub(&ident, &low)?;
        Ok((
            FilterBank {
                low,
                high,
                rows: r,
                kernel: k,
            },
            f3.clone(),
        ))
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.expand.visit(&format!("{prefix}.expand"), f);
        self.dw.visit(&format!("{prefix}.dw"), f);
    }
}

/// Convolve every channel with its row group's low and high kernels
/// (reflect padding); the two outputs sum back to the identity-filtered
/// input.
pub fn decompose<T: Scalar>(
    f3: &Tensor<T>,
    bank: &FilterBank<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let x_l = filter_apply(f3, &bank.low)?;
    let x_h = filter_apply(f3, &bank.high)?;
    Ok((x_l, x_h))
}

/// All-rows-identical Gaussian bank, the fixed-filter ablation baseline.
pub fn fixed_gaussian_bank<T: Scalar>(sigma: f64, rows: usize, k: usize) -> Result<FilterBank<T>> {
    if sigma <= 0.0 {
        return Err(Error::config(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    if k % 2 == 0 {
        return Err(Error::config(format!("gaussian kernel size must be odd, got {k}")));
    }
    let half = (k / 2) as f64;
    let mut kernel = vec![0.0f64; k * k];
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            let (dy, dx) = (i as f64 - half, j as f64 - half);
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            kernel[i * k + j] = v;
            sum += v;
        }
    }
    let low_row: Vec<T> = kernel.iter().map(|v| T::from_f64(v / sum)).collect();
    let high_row = high_pass_from_low(&low_row, k)?;
    let low = Tensor::from_vec(low_row.repeat(rows), &[1, rows, k, k])?;
    let high = Tensor::from_vec(high_row.repeat(rows), &[1, rows, k, k])?;
    Ok(FilterBank {
        low,
        high,
        rows,
        kernel: k,
    })
}

// ---------------------------------------------------------------------------
// Low-pass certificate: power iteration on plain f64 matrices.
// ---------------------------------------------------------------------------

/// High-frequency operator HF[v] = (E − (1/d)·M)·v, i.e. v minus its mean.
pub fn high_frequency_residual(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn validate_row_stochastic(w: &[f64], d: usize) -> Result<()> {
    if w.len() != d * d {
        return Err(Error::dim(format!(
            "matrix has {} entries, expected {}x{}",
            w.len(),
            d,
            d
        )));
    }
    for i in 0..d {
        let row = &w[i * d..(i + 1) * d];
        if row.iter().any(|v| *v < 0.0) {
            return Err(Error::contract(format!("row {i} has a negative entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("row {i} sums to {sum}, expected 1")));
        }
    }
    Ok(())
}

/// Ratio ‖HF[Wᵖm]‖₂ / ‖Wᵖm‖₂ after every power-iteration step 1..=max_p,
/// with ℓ2 renormalization each step. `w` is a row-stochastic d×d matrix
/// in row-major order.
pub fn lowpass_ratio_trajectory(w: &[f64], m: &[f64], d: usize, max_p: usize) -> Result<Vec<f64>> {
    validate_row_stochastic(w, d)?;
    if m.len() != d {
        return Err(Error::dim(format!("vector has {} entries, expected {d}", m.len())));
    }
    if l2_norm(m) == 0.0 {
        return Err(Error::contract("input vector must be nonzero".to_string()));
    }
    let mut v = m.to_vec();
    let mut out = Vec::with_capacity(max_p);
    for _ in 0..max_p {
        let mut next = vec![0.0; d];
        for (i, nv) in next.iter_mut().enumerate() {
            let row = &w[i * d..(i + 1) * d];
            *nv = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm = l2_norm(&next);
        if norm < 1e-300 {
            return Err(Error::Degenerate(
                "power iterate collapsed to the zero vector".to_string(),
            ));
        }
        for x in next.iter_mut() {
            *x /= norm;
        }
        out.push(l2_norm(&high_frequency_residual(&next)));
        v = next;
    }
    Ok(out)
}

/// Final ratio ‖HF[Wᵖm]‖₂ / ‖Wᵖm‖₂ after p steps.
pub fn verify_lowpass(w: &[f64], m: &[f64], d: usize, p: usize) -> Result<f64> {
    let traj = lowpass_ratio_trajectory(w, m, d, p)?;
    Ok(*traj.last().expect("p >= 1"))
}

/// Row-wise softmax of a matrix of standard-normal logits.
pub fn random_row_softmax<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut w = vec![0.0; d * d];
    for row in w.chunks_mut(d) {
        for v in row.iter_mut() {
            *v = crate::tensor::normal_sample(rng);
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, rand_uniform};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_yields_uniform_kernels() {
        // Constant input stays constant through both projections (reflect
        // padding), so all k² logits in a group agree and softmax is uniform.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fdgm = Fdgm::<f64>::new(&mut rng, 4, 2, 3).unwrap();
        let x = Tensor::full(&[1, 4, 6, 6], 0.8);
        let (bank, _) = fdgm.generate(&x).unwrap();
        for v in bank.low.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-9, "kernel entry {v} not uniform");
        }
    }

    #[test]
    fn generated_kernels_are_valid_low_pass_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fdgm = Fdgm::<f64>::new(&mut rng, 4, 2, 3).unwrap();
        for trial in 0..100 {
            let x = rand_uniform::<f64, _>(&mut rng, &[2, 4, 5, 7], -2.0, 2.0);
            let (bank, _) = fdgm.generate(&x).unwrap();
            let low = bank.low.data();
            for (row_idx, row) in low.chunks(9).enumerate() {
                assert!(row.iter().all(|v| *v >= 0.0), "trial {trial} row {row_idx} negative");
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "trial {trial} row {row_idx} sums to {sum}");
            }
            // low + high reconstructs the identity kernel exactly.
            let high = bank.high.data();
            let ident = identity_kernel::<f64>(3);
            for (i, (l, h)) in low.iter().zip(&high).enumerate() {
                assert_eq!(l + h, ident[i % 9], "identity violated at {i}");
            }
        }
    }

    #[test]
    fn banks_depend_on_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fdgm = Fdgm::<f64>::new(&mut rng, 4, 2, 3).unwrap();
        let mut max_gap = 0.0f64;
        for _ in 0..10 {
            let a = rand_uniform::<f64, _>(&mut rng, &[1, 4, 6, 6], -1.0, 1.0);
            let b = rand_uniform::<f64, _>(&mut rng, &[1, 4, 6, 6], -1.0, 1.0);
            let (bank_a, _) = fdgm.generate(&a).unwrap();
            let (bank_b, _) = fdgm.generate(&b).unwrap();
            let gap = bank_a
                .low
                .data()
                .iter()
                .zip(&bank_b.low.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            max_gap = max_gap.max(gap);
        }
        assert!(max_gap > 0.0, "filter bank collapsed to an input-independent state");
    }

    #[test]
    fn generate_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(Fdgm::<f64>::new(&mut rng, 5, 2, 3).is_err());
        let fdgm = Fdgm::<f64>::new(&mut rng, 4, 2, 3).unwrap();
        let too_small = Tensor::<f64>::zeros(&[1, 4, 2, 6]);
        assert!(fdgm.generate(&too_small).is_err());
    }

    #[test]
    fn high_pass_complement_examples() {
        let uniform = vec![1.0f64 / 9.0; 9];
        let high = high_pass_from_low(&uniform, 3).unwrap();
        for (i, v) in high.iter().enumerate() {
            let want = if i == 4 { 8.0 / 9.0 } else { -1.0 / 9.0 };
            assert!((v - want).abs() < 1e-12);
        }

        let onehot = identity_kernel::<f64>(3);
        let high = high_pass_from_low(&onehot, 3).unwrap();
        assert!(high.iter().all(|v| *v == 0.0));

        // Complement plus low restores the identity for any valid low.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut low: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
            let sum: f64 = low.iter().sum();
            low.iter_mut().for_each(|v| *v /= sum);
            let high = high_pass_from_low(&low, 3).unwrap();
            let ident = identity_kernel::<f64>(3);
            for i in 0..9 {
                assert_eq!(low[i] + high[i], ident[i]);
            }
        }

        assert!(high_pass_from_low(&[0.5f64; 9], 3).is_err()); // sum 4.5
        let mut bad = vec![0.2f64; 9];
        bad[0] = -0.2;
        bad[1] = 0.6; // sums to 1 but has a negative entry
        assert!(high_pass_from_low(&bad, 3).is_err());
    }

    #[test]
    fn decompose_constant_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fdgm = Fdgm::<f64>::new(&mut rng, 4, 2, 3).unwrap();
        let x = rand_uniform::<f64, _>(&mut rng, &[1, 4, 6, 6], -1.0, 1.0);
        let (bank, _) = fdgm.generate(&x).unwrap();
        let constant = Tensor::full(&[1, 4, 6, 6], 0.42);
        let (x_l, x_h) = decompose(&constant, &bank).unwrap();
        for v in x_l.data() {
            assert!((v - 0.42).abs() < 1e-9, "low-pass must preserve constants");
        }
        for v in x_h.data() {
            assert!(v.abs() < 1e-9, "high-pass must kill constants");
        }
    }

    #[test]
    fn decompose_is_complementary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fdgm = Fdgm::<f64>::new(&mut rng, 4, 2, 3).unwrap();
        for _ in 0..20 {
            let x = rand_uniform::<f64, _>(&mut rng, &[2, 4, 6, 6], -1.0, 1.0);
            let (bank, f3) = fdgm.generate(&x).unwrap();
            let (x_l, x_h) = decompose(&f3, &bank).unwrap();
            let f3d = f3.data();
            for ((l, h), orig) in x_l.data().iter().zip(&x_h.data()).zip(&f3d) {
                assert!((l + h - orig).abs() < 1e-5, "x_l + x_h must reconstruct f3");
            }
        }
    }

    #[test]
    fn generate_filters_is_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fdgm = Fdgm::<f64>::new(&mut rng, 4, 2, 3).unwrap();
        let x = rand_uniform::<f64, _>(&mut rng, &[1, 4, 5, 5], -1.0, 1.0);
        let params = [
            fdgm.expand.weight.clone(),
            fdgm.expand.bias.clone(),
            fdgm.dw.weight.clone(),
            fdgm.dw.bias.clone(),
        ];
        let report = gradcheck(
            &|_t: &[Tensor<f64>]| {
                let (bank, f3) = fdgm.generate(&x)?;
                let (x_l, _) = decompose(&f3, &bank)?;
                ops::sum(&x_l)
            },
            &params,
            1e-4,
            16,
            11,
        )
        .unwrap();
        assert!(report.passes(1e-3), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gaussian_bank_matches_closed_form() {
        let bank = fixed_gaussian_bank::<f64>(1.0, 2, 3).unwrap();
        // Normalized exp(-(dx²+dy²)/2) on the 3×3 grid.
        let e_half = (-0.5f64).exp();
        let e_one = (-1.0f64).exp();
        let sum = 1.0 + 4.0 * e_half + 4.0 * e_one;
        let low = bank.low.data();
        assert!((low[4] - 1.0 / sum).abs() < 1e-6);
        assert!((low[1] - e_half / sum).abs() < 1e-6);
        assert!((low[0] - e_one / sum).abs() < 1e-6);
        // Both rows identical, unit sums.
        assert_eq!(&low[..9], &low[9..18]);
        let s: f64 = low[..9].iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_bank_limits() {
        let bank = fixed_gaussian_bank::<f64>(1e-3, 1, 3).unwrap();
        let low = bank.low.data();
        assert!((low[4] - 1.0).abs() < 1e-12, "tiny sigma approaches the identity kernel");
        assert!(bank.high.data().iter().all(|v| v.abs() < 1e-12));
        assert!(fixed_gaussian_bank::<f64>(0.0, 1, 3).is_err());
    }

    #[test]
    fn uniform_matrix_reaches_constant_in_one_step() {
        let d = 9;
        let w = vec![1.0 / d as f64; d * d];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..1.0)).collect();
        let ratio = verify_lowpass(&w, &m, d, 1).unwrap();
        assert!(ratio < 1e-12, "uniform averaging zeroes all high frequencies, got {ratio}");
    }

    #[test]
    fn identity_matrix_never_attenuates() {
        // Row-stochastic but not softmax-positive: the ratio stays flat,
        // which is exactly why strict positivity matters.
        let d = 9;
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let traj = lowpass_ratio_trajectory(&w, &m, d, 64).unwrap();
        assert!(traj[0] > 1e-3, "test vector must have high-frequency content");
        assert!(
            (traj[63] - traj[0]).abs() <= 0.01 * traj[0],
            "identity must retain the ratio: {} vs {}",
            traj[63],
            traj[0]
        );
    }

    #[test]
    fn random_softmax_matrices_attenuate() {
        let d = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let w = random_row_softmax(&mut rng, d);
            let mut m: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            m.iter_mut().for_each(|v| *v /= norm);
            let ratio = verify_lowpass(&w, &m, d, 64).unwrap();
            assert!(ratio < 1e-3, "softmax matrix failed to attenuate: {ratio}");
        }
    }

    #[test]
    fn verify_lowpass_contract_errors() {
        let d = 4;
        let w = vec![0.5; d * d]; // rows sum to 2
        assert!(verify_lowpass(&w, &[1.0; 4], d, 8).is_err());
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        assert!(verify_lowpass(&w, &[0.0; 4], d, 8).is_err());
    }
}
