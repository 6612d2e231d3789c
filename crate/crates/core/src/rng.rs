//! Seeded randomness.
//!
//! Every stochastic component draws from its own stream, derived from the
//! experiment seed and a purpose label. The generator is ChaCha8 and the
//! shuffle is a hand-written Fisher–Yates over an unbiased bounded draw, so a
//! given seed yields the same class order on every platform and is not tied to
//! the shuffle implementation of any particular `rand` release.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Builds a generator from a 64-bit seed.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Root of the per-purpose seed tree for one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Seed for `purpose`, optionally indexed (step, epoch, generation...).
    pub fn seed(&self, purpose: &str, index: u64) -> u64 {
        splitmix64(splitmix64(self.root ^ fnv1a(purpose.as_bytes())) ^ splitmix64(index))
    }

    pub fn rng(&self, purpose: &str, index: u64) -> Rng {
        seeded(self.seed(purpose, index))
    }
}

/// Uniform integer in `0..bound` by rejection, free of modulo bias.
pub fn below<R: RngCore + ?Sized>(rng: &mut R, bound: u64) -> u64 {
    assert!(bound > 0, "empty range");
    let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return v % bound;
        }
    }
}

/// Uniform `f64` in `[0, 1)` with 53 random bits.
pub fn unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// In-place Fisher–Yates: for `i` from the end, swap `i` with a uniform `j <= i`.
pub fn shuffle<T, R: RngCore + ?Sized>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Standard normal draw (Box–Muller, one value per call).
pub fn normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1 = unit(rng);
        if u1 > 0.0 {
            let u2 = unit(rng);
            return libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2);
        }
    }
}
