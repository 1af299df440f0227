//! Complex linear algebra, radix-2 FFT, least squares and seeded random
//! streams shared by the rest of the crate.

mod fft;
mod linalg;
mod rng;

pub use fft::{dft, dft_in_place, Direction};
pub use linalg::{cond_1norm, inverse, lstsq, CMat};
pub use rng::RngStream;
pub(crate) use rng::stream_key;

pub use num_complex::Complex64;

/// Squared Euclidean norm of a complex slice.
pub fn energy(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

pub fn db10(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}
