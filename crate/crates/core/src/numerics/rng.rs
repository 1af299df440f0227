use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Deterministic random stream keyed by `(seed, stream_id)`.
///
/// ChaCha is a counter-mode generator, so every stream id selects an
/// independent keystream and the draws do not depend on which thread or in
/// which order streams are consumed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngStream { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Standard real Gaussian.
    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Circular complex Gaussian with unit total variance.
    pub fn complex_gaussian(&mut self) -> Complex64 {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Complex64::new(self.gaussian() * s, self.gaussian() * s)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn uniform_int(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        self.inner.random_range(0..n)
    }
}

/// Packs a hierarchical identifier into one stream id.
pub(crate) fn stream_key(domain: u16, a: u32, b: u32) -> u64 {
    ((domain as u64) << 48) ^ ((a as u64 & 0xffff) << 32) ^ b as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_draws() {
        let mut a = RngStream::new(42, 9);
        let mut b = RngStream::new(42, 9);
        for _ in 0..100 {
            assert_eq!(a.complex_gaussian(), b.complex_gaussian());
        }
    }

    #[test]
    fn complex_variance_is_unity() {
        let mut rng = RngStream::new(1, 2);
        let n = 1_000_000;
        let (mut p, mut re2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.complex_gaussian();
            p += z.norm_sqr();
            re2 += z.re * z.re;
        }
        assert!((p / n as f64 - 1.0).abs() < 0.01);
        assert!((re2 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn streams_are_decorrelated() {
        let mut a = RngStream::new(5, 0);
        let mut b = RngStream::new(5, 1);
        let n = 100_000;
        let mut acc = Complex64::new(0.0, 0.0);
        for _ in 0..n {
            acc += a.complex_gaussian() * b.complex_gaussian().conj();
        }
        assert!((acc / n as f64).norm() < 0.01);
    }

    #[test]
    fn uniform_int_in_range() {
        let mut rng = RngStream::new(0, 0);
        assert!((0..1000).all(|_| rng.uniform_int(4) < 4));
    }

    #[test]
    fn stream_keys_do_not_collide_for_small_ids() {
        let mut seen = std::collections::HashSet::new();
        for d in 0..4 {
            for a in 0..20 {
                for b in 0..50 {
                    assert!(seen.insert(stream_key(d, a, b)));
                }
            }
        }
    }
}
