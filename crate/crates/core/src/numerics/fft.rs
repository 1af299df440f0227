use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `X[k] = sum_n x[n] e^{-j 2 pi k n / N}`, unscaled.
    Forward,
    /// `x[n] = (1/N) sum_k X[k] e^{+j 2 pi k n / N}`.
    Inverse,
}

/// Radix-2 DFT of `v`, returning a new vector.
pub fn dft(v: &[Complex64], direction: Direction) -> Result<Vec<Complex64>> {
    let mut out = v.to_vec();
    dft_in_place(&mut out, direction)?;
    Ok(out)
}

/// Iterative decimation-in-time radix-2 FFT.
pub fn dft_in_place(data: &mut [Complex64], direction: Direction) -> Result<()> {
    let n = data.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    if n == 1 {
        return Ok(());
    }

    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            data.swap(i, j);
        }
    }

    let sign = match direction {
        Direction::Forward => -1.0,
        Direction::Inverse => 1.0,
    };

    // Twiddles are computed directly per stage rather than by recurrence,
    // which keeps the roundtrip error near machine precision for large N.
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / len as f64))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = data[start + k];
                let b = data[start + k + half] * twiddles[k];
                data[start + k] = a + b;
                data[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }

    if direction == Direction::Inverse {
        let scale = 1.0 / n as f64;
        for z in data.iter_mut() {
            *z *= scale;
        }
    }
    Ok(())
}
