//! Seeded random number generation with a pinned, cross-platform stream.
//!
//! Every sampling decision in the crate (shuffles, crop offsets, mixing
//! coefficients, policy actions) flows through [`Rng`] so that a run is fully
//! determined by its 64-bit seed. The raw stream comes from ChaCha8; the
//! distribution algorithms on top of it are implemented here rather than
//! pulled from a distributions crate, so their exact output sequence is part
//! of this crate's contract and cannot drift with dependency upgrades.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Snapshot of an [`Rng`]: enough to restore it bit-exactly.
///
/// `word_pos` is the ChaCha stream position in 32-bit words, split into two
/// u64 halves for serialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

/// Deterministic random number generator.
///
/// Identical seed plus identical call sequence yields identical outputs on
/// every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    core: ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng {
            seed,
            core: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The seed this generator was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent generator for a named sub-stream.
    ///
    /// Mixing is SplitMix64 over `seed ^ stream`, so distinct labels give
    /// statistically independent streams while staying reproducible.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::from_seed(splitmix64(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    pub fn state(&self) -> RngState {
        let pos = self.core.get_word_pos();
        RngState {
            seed: self.seed,
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
        }
    }

    pub fn restore(state: RngState) -> Self {
        let mut rng = Rng::from_seed(state.seed);
        let pos = (state.word_pos_hi as u128) << 64 | state.word_pos_lo as u128;
        rng.core.set_word_pos(pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform f64 in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in (0, 1]; safe as a log argument.
    pub fn uniform_open(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Bernoulli draw with probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box–Muller (two uniforms per draw, no cached spare
    /// so the stream position fully captures the state).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gamma(shape, 1) via Marsaglia–Tsang, boosted for shape < 1.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0, "gamma shape must be positive");
        if shape < 1.0 {
            let boost = self.uniform_open().powf(1.0 / shape);
            return self.gamma(shape + 1.0) * boost;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = (1.0 + c * x).powi(3);
            if v <= 0.0 {
                continue;
            }
            let u = self.uniform_open();
            if u < 1.0 - 0.0331 * x.powi(4) {
                return d * v;
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Beta(alpha, alpha) via the gamma-ratio construction.
    pub fn beta_symmetric(&mut self, alpha: f64) -> f64 {
        assert!(alpha > 0.0, "beta alpha must be positive");
        let x = self.gamma(alpha);
        let y = self.gamma(alpha);
        let s = x + y;
        if s <= 0.0 {
            // Both gammas underflowed to zero; fall back to the mean.
            return 0.5;
        }
        x / s
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        self.shuffle(&mut perm);
        perm
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
