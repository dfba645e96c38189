//! Deterministic pseudo-random numbers: xoshiro256** seeded through SplitMix64.
//!
//! Everything stochastic in this crate (weight init, noise draws, mode
//! sampling, dataset generation) flows through [`Rng`] so that a run is a pure
//! function of its seeds. The generator is hand-rolled rather than pulled from
//! a crate because bit-for-bit reproducibility across platforms and releases
//! is part of the contract: the four-word state is serialized into training
//! checkpoints and sampling manifests, and resumed runs must continue the
//! exact stream.
//!
//! ```
//! use shotflow::rng::Rng;
//! let mut a = Rng::seed_from_u64(7);
//! let mut b = Rng::seed_from_u64(7);
//! assert_eq!(a.next_u64(), b.next_u64());
//! ```

use serde::{Deserialize, Serialize};

/// xoshiro256** generator. State is never all-zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    state: [u64; 4],
}

/// SplitMix64 step, used only to expand a single seed word into the
/// xoshiro256** state. Distinct seeds give well-separated states even for
/// small integers (0, 1, 2, ...).
fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    /// Expand `seed` into a full 256-bit state via four SplitMix64 draws.
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut s = seed;
        let state = [
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
        ];
        // SplitMix64 output is equidistributed over u64^4 minus nothing in
        // particular, but the all-zero state is a fixed point of xoshiro and
        // must be excluded. Unreachable from any u64 seed in practice; guard
        // anyway so restore-from-file cannot brick the stream.
        Rng::from_state(state)
    }

    /// Restore a generator from serialized state (e.g. a checkpoint).
    pub fn from_state(state: [u64; 4]) -> Self {
        let state = if state == [0; 4] {
            [0xdeadbeef, 0, 0, 0]
        } else {
            state
        };
        Rng { state }
    }

    /// Current state, for serialization into manifests and checkpoints.
    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    /// Next raw 64-bit output (xoshiro256** scrambler).
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform double in [0, 1): top 53 bits scaled by 2^-53.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by scaled floor; `n` must be nonzero and
    /// small enough (dataset sizes, mode counts) that the bias of the scaled
    /// draw is far below anything observable.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below(0)");
        let u = self.next_f64();
        let k = (u * n as f64) as usize;
        k.min(n - 1)
    }

    /// Standard normal via Box–Muller. Draws two uniforms per call and
    /// discards the second variate: one fewer word of carried state, and the
    /// cost is irrelevant at this scale.
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1]: avoid ln(0).
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Derive an independent generator for a named sub-stream. Mixes the
    /// label into the current stream's next word so that e.g. per-sample
    /// noise streams do not collide with the parent.
    pub fn derive(&mut self, label: u64) -> Rng {
        let mut s = self.next_u64() ^ label.wrapping_mul(0x9e3779b97f4a7c15);
        Rng::from_state([
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::seed_from_u64(42);
        let mut b = Rng::seed_from_u64(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = Rng::seed_from_u64(0);
        let mut b = Rng::seed_from_u64(1);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::seed_from_u64(3);
        let mut sum = 0.0;
        const N: usize = 100_000;
        for _ in 0..N {
            let u = r.next_f64();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / N as f64;
        // Mean of U[0,1) is 0.5 with sd ~ 0.289/sqrt(N) ~ 0.0009.
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::seed_from_u64(9);
        const N: usize = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..N {
            let x = r.next_normal();
            assert!(x.is_finite());
            sum += x;
            sq += x * x;
        }
        let mean = sum / N as f64;
        let var = sq / N as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn state_roundtrip_resumes_stream() {
        let mut r = Rng::seed_from_u64(11);
        for _ in 0..17 {
            r.next_u64();
        }
        let saved = r.state();
        let ahead: Vec<u64> = (0..16).map(|_| r.next_u64()).collect();
        let mut resumed = Rng::from_state(saved);
        let replay: Vec<u64> = (0..16).map(|_| resumed.next_u64()).collect();
        assert_eq!(ahead, replay);
    }

    #[test]
    fn zero_state_is_rejected() {
        // The all-zero state is a fixed point (the stream would be constant
        // zero); from_state must swap in something that actually mixes.
        let mut r = Rng::from_state([0; 4]);
        let mut outputs = std::collections::HashSet::new();
        for _ in 0..64 {
            outputs.insert(r.next_u64());
        }
        assert!(outputs.len() > 32);
    }

    #[test]
    fn derived_streams_are_independent() {
        let mut parent = Rng::seed_from_u64(5);
        let mut c0 = parent.derive(0);
        let mut parent2 = Rng::seed_from_u64(5);
        let mut c1 = parent2.derive(1);
        let xs: Vec<u64> = (0..8).map(|_| c0.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| c1.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn next_below_covers_range() {
        let mut r = Rng::seed_from_u64(21);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let k = r.next_below(7);
            assert!(k < 7);
            seen[k] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
