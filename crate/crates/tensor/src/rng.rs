//! Seeded, splittable random streams.
//!
//! Every consumer of randomness (weight init, data shuffling, channel noise,
//! pilot generation) draws from its own `(seed, stream_id)` pair so that the
//! sequence it sees does not depend on how much randomness anyone else used.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Well-known stream identifiers.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const CHANNEL: u64 = 3;
    pub const PILOT: u64 = 4;
    pub const DATA: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const LINK: u64 = 7;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Independent sub-stream, e.g. one per image or per datagram.
    pub fn child(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(1))),
        }
    }

    pub fn rng(&self) -> Sampler {
        let mut inner = ChaCha20Rng::seed_from_u64(self.seed);
        inner.set_stream(self.stream_id);
        Sampler { inner }
    }
}

/// A live generator for one [`RngStream`].
pub struct Sampler {
    inner: ChaCha20Rng,
}

impl Sampler {
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Normal with standard deviation `std`, redrawn until within two deviations.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_stream_same_sequence() {
        let a: Vec<f64> = {
            let mut r = RngStream::new(7, 3).rng();
            (0..16).map(|_| r.normal()).collect()
        };
        let b: Vec<f64> = {
            let mut r = RngStream::new(7, 3).rng();
            (0..16).map(|_| r.normal()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = RngStream::new(7, 3).rng();
        let mut b = RngStream::new(7, 4).rng();
        let mut c = RngStream::new(7, 3).child(0).rng();
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut r = RngStream::new(1, 1).rng();
        for _ in 0..10_000 {
            assert!(r.truncated_normal(0.02).abs() <= 0.04);
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        RngStream::new(2, 2).rng().shuffle(&mut v);
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_ne!(v, s);
    }
}
