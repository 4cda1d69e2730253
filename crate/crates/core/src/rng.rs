//! Seeded pseudo-random numbers.
//!
//! Everything random in this crate (parameter init, synthetic data, fold
//! shuffles, mini-batch order) is drawn from [`SplitMix64`], a 64-bit generator
//! simple enough to reimplement bit-exactly elsewhere:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! return z ^ (z >> 31)                      (all arithmetic wrapping mod 2^64)
//! ```
//!
//! Derived draws:
//! - `next_f64`: `(next_u64 >> 11) * 2^-53`, uniform in `[0, 1)`.
//! - `below(n)`: `next_u64 % n`.
//! - `normal`: Box-Muller cosine branch, `u1 = 1 - next_f64`, `u2 = next_f64`,
//!   `sqrt(-2 ln u1) * cos(2 pi u2)`; one normal per two uniforms.
//! - `shuffle`: Fisher-Yates from the back, `for i in (1..n).rev() { swap(i, below(i + 1)) }`.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream for a (seed, stream) pair: the seed is mixed with the
    /// stream tag through one generator step so nearby tags do not overlap.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut g = SplitMix64::new(seed ^ stream.wrapping_mul(GOLDEN_GAMMA).rotate_left(17));
        let s = g.next_u64();
        SplitMix64::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        self.next_u64() % n
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
