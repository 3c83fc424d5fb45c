//! Counter-based Gaussian generator.
//!
//! Every draw is a pure function of (seed, path, step, component), so batches
//! can be generated in any order, on any number of workers, in disjoint
//! chunks, and the bits come out identical. This is what makes common random
//! numbers free: two simulations started from different points but the same
//! seed consume exactly the same increments.
//!
//! Not cryptographic. The mixer is the splitmix64 finalizer, which is plenty
//! for Monte Carlo moments.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline(always)]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in (0, 1] from the top 53 bits.
#[inline(always)]
fn unit_pos(bits: u64) -> f64 {
    (((bits >> 11) + 1) as f64) * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform in [0, 1) from the top 53 bits.
#[inline(always)]
fn unit(bits: u64) -> f64 {
    ((bits >> 11) as f64) * (1.0 / 9_007_199_254_740_992.0)
}

/// Stateless counter RNG keyed by a 64-bit seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derived stream for grid point `index` (xor rule: index 0 is the base
    /// stream itself).
    pub fn derive(&self, index: u64) -> Self {
        Self {
            seed: self.seed ^ index,
        }
    }

    #[inline(always)]
    fn key(&self, a: u64, b: u64, c: u64) -> u64 {
        let mut h = mix64(self.seed ^ GOLDEN);
        h = mix64(h ^ a);
        h = mix64(h ^ b.wrapping_mul(0xd6e8_feb8_6659_fd93));
        mix64(h ^ c.wrapping_mul(0xa24b_aed4_963e_e407))
    }

    /// Uniform in [0, 1) indexed by the counter triple.
    #[inline(always)]
    pub fn uniform(&self, a: u64, b: u64, c: u64) -> f64 {
        unit(mix64(self.key(a, b, c)))
    }

    /// Standard normal draw indexed by (path, step, component), Box-Muller.
    #[inline(always)]
    pub fn standard_normal(&self, path: u64, step: u64, comp: u64) -> f64 {
        let k = self.key(path, step, comp);
        let u1 = unit_pos(mix64(k.wrapping_add(GOLDEN)));
        let u2 = unit(mix64(k.wrapping_add(GOLDEN.wrapping_mul(2))));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
