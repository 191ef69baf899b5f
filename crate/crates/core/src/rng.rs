//! Counter-based deterministic random numbers.
//!
//! Every random draw is a pure function of `(key, counter)`, so any training
//! run is exactly reproducible from its seed and step number, independent of
//! call order elsewhere in the program and of the platform.

/// SplitMix64 finalizer: a well-mixed bijection on `u64`.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A stateless generator keyed by a 64-bit value; draws are indexed by counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        CounterRng { key }
    }

    /// Derive a sub-generator, e.g. per step or per parameter tensor.
    pub fn derive(&self, stream: u64) -> Self {
        CounterRng {
            key: splitmix64(self.key ^ splitmix64(stream)),
        }
    }

    pub fn next_u64(&self, counter: u64) -> u64 {
        splitmix64(self.key.wrapping_add(splitmix64(counter ^ 0x5851_f42d_4c95_7f2d)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&self, counter: u64) -> f64 {
        (self.next_u64(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&self, counter: u64, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        (self.uniform(counter) * bound as f64) as u64 % bound
    }

    /// Standard normal via Box-Muller on two indexed uniforms.
    pub fn normal(&self, counter: u64) -> f64 {
        let u1 = self.uniform(counter.wrapping_mul(2));
        let u2 = self.uniform(counter.wrapping_mul(2).wrapping_add(1));
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal with mean 0 and the given stddev, resampled until `|z| <= 2σ`.
    pub fn truncated_normal(&self, counter: u64, stddev: f64) -> f64 {
        let mut ctr = counter;
        for _ in 0..64 {
            let z = self.normal(ctr);
            if z.abs() <= 2.0 {
                return z * stddev;
            }
            // Rejected draws re-index into a disjoint counter range.
            ctr = ctr.wrapping_add(0x8000_0000_0000_0000);
        }
        0.0
    }

    /// Fisher-Yates shuffle driven by indexed draws.
    pub fn shuffle<T>(&self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64, (i + 1) as u64) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_reproducible() {
        let a = CounterRng::new(42);
        let b = CounterRng::new(42);
        for c in 0..100 {
            assert_eq!(a.next_u64(c), b.next_u64(c));
        }
    }

    #[test]
    fn streams_differ() {
        let base = CounterRng::new(7);
        assert_ne!(base.derive(0).next_u64(0), base.derive(1).next_u64(0));
        assert_ne!(base.next_u64(0), base.next_u64(1));
    }

    #[test]
    fn uniform_in_unit_interval() {
        let rng = CounterRng::new(123);
        for c in 0..10_000 {
            let u = rng.uniform(c);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn truncated_normal_bounded() {
        let rng = CounterRng::new(9);
        for c in 0..10_000 {
            assert!(rng.truncated_normal(c, 0.02).abs() <= 0.04 + 1e-12);
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let rng = CounterRng::new(5);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for c in 0..n {
            let z = rng.normal(c as u64);
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let rng = CounterRng::new(77);
        let mut v: Vec<u32> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
