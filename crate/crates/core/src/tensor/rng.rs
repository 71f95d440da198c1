use serde::{Deserialize, Serialize};

use super::{numel, Element, Tensor};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator: draw `i` of a stream is a pure function of
/// `(key, i)`, so streams can be derived per sample and replayed anywhere.
///
/// Transcendental functions come from `libm`, which keeps normal draws
/// bit-identical across platforms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed ^ 0x6A09_E667_F3BC_C908),
            counter: 0,
        }
    }

    /// Independent stream for `(seed, stream)`, e.g. one per dataset sample.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Rng::new(hash2(seed, stream))
    }

    /// Child stream of this generator, without advancing it.
    pub fn fork(&self, stream: u64) -> Self {
        Rng {
            key: mix(self.key ^ mix(stream.wrapping_add(1).wrapping_mul(GAMMA))),
            counter: 0,
        }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// `(key, counter)`; [`Rng::from_state`] resumes the stream exactly.
    pub fn state(&self) -> (u64, u64) {
        (self.key, self.counter)
    }

    pub fn from_state(key: u64, counter: u64) -> Self {
        Rng { key, counter }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box–Muller (one draw per pair of uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn randn<F: Element>(&mut self, shape: impl Into<Vec<usize>>) -> Tensor<F> {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(|_| F::lit(self.normal())).collect();
        Tensor::from_parts(shape, data)
    }

    pub fn rand_uniform<F: Element>(
        &mut self,
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
    ) -> Tensor<F> {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| F::lit(self.uniform_range(lo, hi)))
            .collect();
        Tensor::from_parts(shape, data)
    }
}

/// Stable 64-bit hash of a pair, used to derive per-sample seeds.
pub fn hash2(a: u64, b: u64) -> u64 {
    mix(mix(a).wrapping_add(GAMMA) ^ mix(b.wrapping_mul(GAMMA).wrapping_add(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Tensor<f32> = Rng::new(42).randn([4]);
        let b: Tensor<f32> = Rng::new(42).randn([4]);
        assert_eq!(a, b);
        let c: Tensor<f32> = Rng::new(43).randn([4]);
        assert_ne!(a, c);
    }

    #[test]
    fn known_stream_prefix_is_pinned() {
        // Guards against accidental changes to the generator; these values
        // must never depend on platform or build flags.
        let mut rng = Rng::new(0);
        let first: Vec<u64> = (0..3).map(|_| rng.next_u64()).collect();
        assert_eq!(
            first,
            [0x90287996c3e2222a, 0xbba11c9520801bef, 0x628947247d01f6a7]
        );
    }

    #[test]
    fn normal_moments_over_a_million_draws() {
        let mut rng = Rng::new(7);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = rng.normal();
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn below_stays_in_range_and_covers_it() {
        let mut rng = Rng::new(3);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let v = rng.below(7) as usize;
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn derived_streams_differ() {
        let a = Rng::derive(5, 0).next_u64();
        let b = Rng::derive(5, 1).next_u64();
        let c = Rng::derive(6, 0).next_u64();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        Rng::new(1).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
