//! Seeded pseudo-random number generation.
//!
//! The generator implements xoshiro256** with splitmix64 seeding, so every
//! stream is fully determined by a single 64-bit seed. Named forks derive
//! independent child streams (one per module / study / replica) without
//! advancing the parent, which keeps corpus generation and training runs
//! reproducible regardless of evaluation order.

/// One splitmix64 step; used for seeding and stream derivation.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a label, for deriving fork seeds from names.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// xoshiro256** stream with a recorded stream seed for forking.
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
    stream_seed: u64,
    gauss_cache: Option<f64>,
}

impl Rng {
    /// Seed the four state words from a 64-bit seed via splitmix64.
    pub fn seed_from_u64(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s, stream_seed: seed, gauss_cache: None }
    }

    /// Child stream for a named sub-component. Does not advance `self`.
    pub fn fork(&self, label: &str) -> Rng {
        let mut sm = self.stream_seed ^ fnv1a(label.as_bytes()).rotate_left(17);
        Rng::seed_from_u64(splitmix64(&mut sm))
    }

    /// Child stream for an indexed item (study i, seed replica i, ...).
    pub fn fork_index(&self, index: u64) -> Rng {
        let mut sm = self.stream_seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(31);
        Rng::seed_from_u64(splitmix64(&mut sm))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n) via the multiply-shift map.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller; the paired value is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.gauss_cache.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_cache = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Pick one element by reference.
    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::seed_from_u64(42);
        let mut b = Rng::seed_from_u64(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn forks_are_independent_of_parent_consumption() {
        let root = Rng::seed_from_u64(7);
        let mut sibling = root.fork("gen");
        let mut root2 = Rng::seed_from_u64(7);
        root2.next_u64(); // consuming the parent must not change fork streams
        let mut sibling2 = Rng::seed_from_u64(7).fork("gen");
        let _ = root2;
        for _ in 0..10 {
            assert_eq!(sibling.next_u64(), sibling2.next_u64());
        }
    }

    #[test]
    fn forks_differ_by_label_and_index() {
        let root = Rng::seed_from_u64(7);
        assert_ne!(root.fork("a").next_u64(), root.fork("b").next_u64());
        assert_ne!(root.fork_index(0).next_u64(), root.fork_index(1).next_u64());
    }

    #[test]
    fn xoshiro_reference_sequence() {
        // Reference outputs for state (1, 2, 3, 4) from the published
        // xoshiro256** recurrence, computed independently by hand-stepping
        // rotl(s1 * 5, 7) * 9 with the state update.
        let mut r = Rng { s: [1, 2, 3, 4], stream_seed: 0, gauss_cache: None };
        assert_eq!(r.next_u64(), 11520);
        assert_eq!(r.next_u64(), 0);
        assert_eq!(r.next_u64(), 1509978240);
        assert_eq!(r.next_u64(), 1215971899390074240);
        assert_eq!(r.next_u64(), 1216172134540287360);
    }

    #[test]
    fn uniform_and_normal_moments() {
        let mut r = Rng::seed_from_u64(123);
        let n = 20_000;
        let mean_u: f64 = (0..n).map(|_| r.next_f64()).sum::<f64>() / n as f64;
        assert!((mean_u - 0.5).abs() < 0.01, "uniform mean {mean_u}");
        let vals: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean_g: f64 = vals.iter().sum::<f64>() / n as f64;
        let var_g: f64 = vals.iter().map(|v| (v - mean_g) * (v - mean_g)).sum::<f64>() / n as f64;
        assert!(mean_g.abs() < 0.03, "normal mean {mean_g}");
        assert!((var_g - 1.0).abs() < 0.05, "normal var {var_g}");
    }

    #[test]
    fn below_covers_range_uniformly() {
        let mut r = Rng::seed_from_u64(5);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[r.below(5)] += 1;
        }
        for &c in &counts {
            assert!(c > 1700 && c < 2300, "bucket count {c}");
        }
    }
}
