//! Seeded random numbers.
//!
//! Everything stochastic in the crate draws from [`Rng`], a splitmix64
//! generator. Each run component (dataset sample, model init, training
//! step, evaluation example) derives its own substream from a root seed
//! and a stream id, so results are bit-identical across runs and
//! independent of thread scheduling.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Splitmix64 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derives an independent substream from `(seed, stream)`.
    ///
    /// The pair is mixed through two splitmix steps so that adjacent
    /// stream ids do not produce correlated sequences.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut r = Rng::new(seed);
        let a = r.next_u64();
        let mut r2 = Rng::new(a ^ stream.wrapping_mul(GAMMA));
        let b = r2.next_u64();
        Rng::new(b)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform double in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n) without modulo bias (rejection).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller. The cosine branch is used and the
    /// sine partner discarded, keeping the stream position independent of
    /// call pairing.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u1 = self.next_f64();
            let u2 = self.next_f64();
            if u1 > 0.0 {
                let r = (-2.0 * u1.ln()).sqrt();
                return r * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }

    /// Fills a fresh vector with standard normal draws.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_differ() {
        let a: Vec<u64> = (0..8).map(|_| Rng::substream(1, 0).next_u64()).collect();
        let b: Vec<u64> = (0..8).map(|_| Rng::substream(1, 1).next_u64()).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_in_range() {
        let mut r = Rng::new(3);
        for _ in 0..1000 {
            let v = r.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn below_is_unbiased_enough() {
        let mut r = Rng::new(11);
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            counts[r.below(3)] += 1;
        }
        let expect = n as f64 / 3.0;
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for &c in &counts {
            assert!((c as f64 - expect).abs() < 5.0 * sigma, "counts {counts:?}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(42);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
