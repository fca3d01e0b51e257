//! Deterministic pseudo-random streams.
//!
//! Everything stochastic in this crate (weight initialization, dataset
//! generation, mini-batch shuffling, coordinate subsampling) draws from a
//! [`Stream`], a SplitMix64 generator with a label-based splitting scheme.
//! The algorithm is fixed and fully specified below, so a seed produces the
//! same values on every platform and in every future build:
//!
//! * State advance: `state += 0x9E3779B97F4A7C15` (the 64-bit golden ratio).
//! * Output mix (Stafford variant 13):
//!   `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
//!    z *= 0x94D049BB133111EB; z ^= z >> 31`.
//! * Child streams: `derive(label)` seeds a new stream with
//!   `mix(parent_seed ^ fnv1a64(label))`, where fnv1a64 uses offset basis
//!   `0xcbf29ce484222325` and prime `0x100000001b3`.
//! * `uniform()` maps the top 53 bits to `[0, 1)`: `(x >> 11) * 2^-53`.
//! * `below(n)` is Lemire's multiply-shift: `(x as u128 * n as u128) >> 64`.
//! * `normal()` is Box-Muller on two `uniform()` draws, returning the cosine
//!   branch first and caching the sine branch.
//!
//! Splitting by label means adding a new consumer (say, one more layer to
//! initialize) never perturbs the draws seen by existing consumers.

/// Golden-ratio increment for the SplitMix64 state.
const GOLDEN: u64 = 0x9E3779B97F4A7C15;

fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58476D1CE4E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A seeded, splittable SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct Stream {
    seed: u64,
    state: u64,
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            seed,
            state: seed,
            spare_normal: None,
        }
    }

    /// Seed this stream was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `label`; independent of draws made on `self`.
    pub fn derive(&self, label: &str) -> Stream {
        Stream::new(mix(self.seed ^ fnv1a64(label.as_bytes())))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // uniform() can return 0; shift into (0, 1] for the logarithm.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
