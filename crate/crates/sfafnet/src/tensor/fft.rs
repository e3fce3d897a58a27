//! 2-d discrete Fourier transform: radix-2 FFT on power-of-two sizes,
//! naive DFT otherwise. Unnormalized in both directions.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// exp(-2πi kn/N) twiddles.
    Forward,
    /// exp(+2πi kn/N) twiddles, no 1/N scaling.
    Inverse,
}

fn sign(dir: Direction) -> f64 {
    match dir {
        Direction::Forward => -1.0,
        Direction::Inverse => 1.0,
    }
}

/// In-place iterative radix-2 Cooley-Tukey; `data.len()` must be a power of two.
fn fft_pow2<T: Scalar>(data: &mut [Complex<T>], dir: Direction) {
    let n = data.len();
    if n <= 1 {
        return;
    }
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            data.swap(i, j);
        }
    }
    let s = sign(dir);
    let mut len = 2;
    while len <= n {
        let ang = s * 2.0 * std::f64::consts::PI / len as f64;
        let wlen = Complex::new(T::from_f64(ang.cos()), T::from_f64(ang.sin()));
        for start in (0..n).step_by(len) {
            let mut w = Complex::new(T::one(), T::zero());
            for i in 0..len / 2 {
                let u = data[start + i];
                let v = data[start + i + len / 2] * w;
                data[start + i] = u + v;
                data[start + i + len / 2] = u - v;
                w = w * wlen;
            }
        }
        len <<= 1;
    }
}

/// Naive O(n²) DFT for sizes that are not powers of two.
fn dft_naive<T: Scalar>(data: &[Complex<T>], dir: Direction) -> Vec<Complex<T>> {
    let n = data.len();
    let s = sign(dir);
    let mut out = vec![Complex::new(T::zero(), T::zero()); n];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex::new(T::zero(), T::zero());
        for (j, v) in data.iter().enumerate() {
            let ang = s * 2.0 * std::f64::consts::PI * (k * j % n) as f64 / n as f64;
            let tw = Complex::new(T::from_f64(ang.cos()), T::from_f64(ang.sin()));
            acc += *v * tw;
        }
        *o = acc;
    }
    out
}

fn transform_1d<T: Scalar>(data: &mut Vec<Complex<T>>, dir: Direction) {
    if data.len().is_power_of_two() {
        fft_pow2(data, dir);
    } else {
        *data = dft_naive(data, dir);
    }
}

/// 2-d transform of an H×W complex grid, rows first then columns.
pub fn fft2_complex<T: Scalar>(grid: &mut [Complex<T>], h: usize, w: usize, dir: Direction) {
    assert_eq!(grid.len(), h * w, "grid length must be h*w");
    let mut row = Vec::with_capacity(w);
    for r in 0..h {
        row.clear();
        row.extend_from_slice(&grid[r * w..(r + 1) * w]);
        transform_1d(&mut row, dir);
        grid[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    let mut col = Vec::with_capacity(h);
    for cidx in 0..w {
        col.clear();
        col.extend((0..h).map(|r| grid[r * w + cidx]));
        transform_1d(&mut col, dir);
        for (r, v) in col.iter().enumerate() {
            grid[r * w + cidx] = *v;
        }
    }
}

/// Forward 2-d DFT of a real H×W plane.
pub fn fft2_real<T: Scalar>(plane: &[T], h: usize, w: usize) -> Vec<Complex<T>> {
    let mut grid: Vec<Complex<T>> = plane.iter().map(|v| Complex::new(*v, T::zero())).collect();
    fft2_complex(&mut grid, h, w, Direction::Forward);
    grid
}

/// Standard unnormalized 2-d DFT of a real 2-d tensor.
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<Vec<Complex<T>>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("fft2 expects an H×W tensor, got {s:?}")));
    }
    Ok(x.with_data(|d| fft2_real(d, s[0], s[1])))
}
