//! Seeded random number generator.
//!
//! The generator is xoshiro256++ (Blackman & Vigna), seeded by expanding a
//! 64-bit seed through splitmix64. It is implemented here rather than pulled
//! from a crate so the stream is pinned: identical seeds produce identical
//! splits, weight initializations, and dropout masks on every platform and
//! under every dependency set.

use crate::error::{Error, Result};

/// Deterministic xoshiro256++ stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
    /// Cached second output of the Box-Muller transform.
    normal_spare: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            state,
            normal_spare: None,
        }
    }

    /// Derive an independent child stream, keyed by `tag`.
    pub fn derive(&self, tag: u64) -> Rng {
        let mut sm = self.state[0] ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            state,
            normal_spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased integer in [0, n) via rejection sampling.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        let threshold = n.wrapping_neg() % n; // 2^64 mod n
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> Result<f32> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::InvalidParameter(format!(
                "uniform bounds [{lo}, {hi})"
            )));
        }
        Ok((lo as f64 + (hi as f64 - lo as f64) * self.next_f64()) as f32)
    }

    pub fn uniform_vec(&mut self, lo: f32, hi: f32, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    /// Normal draw via the Box-Muller transform (pair cached).
    pub fn normal(&mut self, mu: f32, sigma: f32) -> Result<f32> {
        if !(mu.is_finite() && sigma.is_finite()) || sigma < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "normal(mu={mu}, sigma={sigma})"
            )));
        }
        let z = match self.normal_spare.take() {
            Some(z) => z,
            None => {
                let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln finite
                let u2 = self.next_f64();
                let r = (-2.0 * u1.ln()).sqrt();
                let theta = std::f64::consts::TAU * u2;
                self.normal_spare = Some(r * theta.sin());
                r * theta.cos()
            }
        };
        Ok((mu as f64 + sigma as f64 * z) as f32)
    }

    pub fn normal_vec(&mut self, mu: f32, sigma: f32, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| self.normal(mu, sigma)).collect()
    }

    pub fn bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("bernoulli(p={p})")));
        }
        // p == 1.0 must always hit, p == 0.0 never; next_f64 is in [0, 1).
        Ok(self.next_f64() < p)
    }

    pub fn bernoulli_vec(&mut self, p: f64, n: usize) -> Result<Vec<bool>> {
        (0..n).map(|_| self.bernoulli(p)).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn shuffle_is_deterministic_and_a_permutation() {
        let mut a: Vec<u32> = (0..50).collect();
        let mut b = a.clone();
        Rng::new(99).shuffle(&mut a);
        Rng::new(99).shuffle(&mut b);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn bernoulli_endpoints() {
        let mut rng = Rng::new(1);
        assert!(rng.bernoulli_vec(0.0, 1000).unwrap().iter().all(|&b| !b));
        assert!(rng.bernoulli_vec(1.0, 1000).unwrap().iter().all(|&b| b));
    }

    #[test]
    fn bernoulli_mean_within_three_sigma() {
        let mut rng = Rng::new(42);
        let p = 0.3;
        let n = 1_000_000u32;
        let hits = (0..n).filter(|_| rng.bernoulli(p).unwrap()).count();
        let mean = hits as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (mean - p).abs() < 3.0 * sigma,
            "mean {mean} vs p {p} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn uniform_symmetric_mean_bound() {
        // var(U(-a, a)) = (2a)^2 / 12, so the mean of 10^6 draws stays
        // inside 3a/sqrt(12e6) with large margin.
        let a = 2.0f64;
        let n = 1_000_000u32;
        let mut rng = Rng::new(2024);
        let sum: f64 = (0..n)
            .map(|_| rng.uniform(-(a as f32), a as f32).unwrap() as f64)
            .sum();
        let mean = sum / n as f64;
        let bound = 3.0 * a / (12.0 * n as f64).sqrt();
        assert!(mean.abs() < bound, "mean {mean} exceeds bound {bound}");
    }

    #[test]
    fn normal_moments_sane() {
        let mut rng = Rng::new(5);
        let n = 200_000;
        let xs = rng.normal_vec(1.0, 2.0, n).unwrap();
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var - 4.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mut rng = Rng::new(0);
        assert!(rng.uniform(1.0, 1.0).is_err());
        assert!(rng.uniform(f32::NAN, 1.0).is_err());
        assert!(rng.normal(0.0, -1.0).is_err());
        assert!(rng.bernoulli(1.5).is_err());
    }
}
