//! Portable, seedable pseudo-random numbers.
//!
//! The generator is SplitMix64:
//!
//! ```text
//! state ← state + 0x9E3779B97F4A7C15
//! z ← state
//! z ← (z ⊕ (z >> 30)) · 0xBF58476D1CE4E5B9
//! z ← (z ⊕ (z >> 27)) · 0x94D049BB133111EB
//! output z ⊕ (z >> 31)
//! ```
//!
//! (all arithmetic wrapping mod 2⁶⁴). Derived quantities:
//!
//! * `next_f64 = (next_u64 >> 11) · 2⁻⁵³`, in `[0, 1)`;
//! * `below(n) = (next_u64 · n) >> 64` using 128-bit arithmetic;
//! * `normal()` is Box–Muller, `sqrt(−2 ln(1 − u₁)) · cos(2π u₂)`, two draws
//!   per sample and no caching;
//! * independent streams: `Rng::stream(seed, id)` seeds a generator with
//!   `mix(seed ⊕ mix(id + 0x9E3779B97F4A7C15))`, where `mix` is the output
//!   function above applied to its argument.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Sub-seed offsets used when deriving streams from a single run seed.
pub mod streams {
    pub const DATASET: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const GRADCHECK: u64 = 5;
    pub const VALIDATION: u64 = 6;
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn stream(seed: u64, id: u64) -> Self {
        Self::new(mix(seed ^ mix(id.wrapping_add(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates shuffle, drawing `below(i + 1)` for `i` from the end.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of SplitMix64 seeded with 1234567.
        let mut r = Rng::new(1234567);
        assert_eq!(r.next_u64(), 6457827717110365317);
        assert_eq!(r.next_u64(), 3203168211198807973);
        assert_eq!(r.next_u64(), 9817491932198370423);
    }

    #[test]
    fn streams_differ_and_repeat() {
        let a: Vec<u64> = (0..4).map(|_| Rng::stream(7, 1).next_u64()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(Rng::stream(7, 1).next_u64(), Rng::stream(7, 2).next_u64());
        assert_ne!(Rng::stream(7, 1).next_u64(), Rng::stream(8, 1).next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(42);
        let xs: Vec<f64> = (0..20000).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = Rng::new(3);
        for n in 1..50 {
            assert!(r.below(n) < n);
        }
    }
}
