//! Deterministic random streams.
//!
//! Every random draw in the crate flows from a single root seed expanded
//! into named sub-streams (`data`, `init`, `shuffle`, ...). A sub-stream
//! seed is `splitmix64(root ^ fnv1a(name) ^ mix(indices))`, which feeds a
//! ChaCha8 generator. Float and shuffle helpers are implemented directly
//! on the raw 64-bit output so the byte stream fully determines every
//! value we produce, independent of third-party distribution code.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Algorithm identity recorded in dataset manifests.
pub const RNG_ALGORITHM: &str = "chacha8+splitmix64-streams";

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive the 64-bit seed of a named sub-stream.
/// Stable 64-bit hash of a name, for keying style streams by domain.
pub fn hash_name(s: &str) -> u64 {
    fnv1a(s.as_bytes())
}

pub fn derive_seed(root: u64, stream: &str, indices: &[u64]) -> u64 {
    let mut s = root ^ fnv1a(stream.as_bytes());
    for &ix in indices {
        s = splitmix64(s ^ splitmix64(ix));
    }
    splitmix64(s)
}

/// A seedable random stream with the float/shuffle helpers the crate needs.
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn from_seed(seed: u64) -> Self {
        StreamRng { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn derive(root: u64, stream: &str, indices: &[u64]) -> Self {
        Self::from_seed(derive_seed(root, stream, indices))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1): top 53 bits scaled by 2^-53.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform in [0, n) via 128-bit multiply-shift.
    pub fn range_usize(&mut self, n: usize) -> usize {
        assert!(n > 0, "range_usize needs n > 0");
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.range_usize(i + 1);
            v.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = StreamRng::derive(7, "data", &[1, 2]);
        let mut b = StreamRng::derive(7, "data", &[1, 2]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn named_streams_differ() {
        let mut a = StreamRng::derive(7, "data", &[]);
        let mut b = StreamRng::derive(7, "init", &[]);
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn indices_extend_the_stream_name() {
        assert_ne!(derive_seed(0, "s", &[0]), derive_seed(0, "s", &[1]));
        assert_ne!(derive_seed(0, "s", &[0, 1]), derive_seed(0, "s", &[1, 0]));
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = StreamRng::from_seed(3);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut r = StreamRng::from_seed(11);
        let n = 50_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean = {mean}");
        assert!((var - 1.0).abs() < 0.05, "var = {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = StreamRng::from_seed(5);
        let mut v: Vec<usize> = (0..100).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
