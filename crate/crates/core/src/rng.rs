//! Counter-based random numbers for replayable walks.
//!
//! Every walk owns a [`Sampler`] built from a [`PathSeed`]. The sampler keeps
//! no state beyond a 64-bit key and a draw counter, and draw `i` is a pure
//! function of `(key, i)`. Rebuilding a sampler from the same seed therefore
//! replays the exact sequence of the primal walk, no matter which thread runs
//! it or how many draws each step consumed.

/// Identifies the random stream of one walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PathSeed {
    pub experiment_seed: u64,
    /// Unique per (query point, sample index) pair.
    pub walk_index: u64,
}

impl PathSeed {
    pub const fn new(experiment_seed: u64, walk_index: u64) -> Self {
        Self {
            experiment_seed,
            walk_index,
        }
    }

    /// Seed of an auxiliary stream hanging off this walk, e.g. a nested walk
    /// spawned during the adjoint pass. Never collides with the parent stream
    /// because the experiment seed is remixed.
    pub fn derive(&self, tag: u64) -> PathSeed {
        PathSeed {
            experiment_seed: mix64(self.experiment_seed ^ 0xA076_1D64_78BD_642F),
            walk_index: mix64(self.walk_index ^ mix64(tag.wrapping_add(0xE703_7ED1_A0B4_28DB))),
        }
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer (a bijection on u64).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-walk uniform sampler. Each call to [`Sampler::next_uniform`] advances
/// the counter by exactly one.
#[derive(Debug, Clone)]
pub struct Sampler {
    key: u64,
    counter: u64,
}

impl Sampler {
    pub fn new(seed: PathSeed) -> Self {
        let a = mix64(seed.experiment_seed.wrapping_add(GOLDEN));
        let b = mix64(seed.walk_index ^ 0xD6E8_FEB8_6659_FD93);
        Self {
            key: mix64(a ^ b.rotate_left(17)).wrapping_add(b),
            counter: 0,
        }
    }

    /// Number of draws consumed so far.
    pub fn draws(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let x = self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN));
        self.counter += 1;
        // Two rounds decorrelate neighbouring keys and counters.
        mix64(mix64(x) ^ self.key.rotate_left(29))
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_equal_streams() {
        let mut a = Sampler::new(PathSeed::new(0, 0));
        let mut b = Sampler::new(PathSeed::new(0, 0));
        for _ in 0..1000 {
            assert_eq!(a.next_uniform().to_bits(), b.next_uniform().to_bits());
        }
    }

    #[test]
    fn adjacent_walks_differ_almost_everywhere() {
        let mut a = Sampler::new(PathSeed::new(0, 0));
        let mut b = Sampler::new(PathSeed::new(0, 1));
        let differing = (0..1000)
            .filter(|_| a.next_uniform() != b.next_uniform())
            .count();
        assert!(differing > 990, "{differing}");
    }

    #[test]
    fn range_contract() {
        let mut s = Sampler::new(PathSeed::new(7, 42));
        for _ in 0..1_000_000 {
            let u = s.next_uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn mean_of_a_million_draws() {
        let mut s = Sampler::new(PathSeed::new(3, 9));
        let n = 1_000_000;
        let mean = (0..n).map(|_| s.next_uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.002, "{mean}");
    }

    #[test]
    fn replay_and_consecutive_draws() {
        let seed = PathSeed::new(11, 5);
        let mut s = Sampler::new(seed);
        let first: Vec<f64> = (0..16).map(|_| s.next_uniform()).collect();
        assert_eq!(s.draws(), 16);
        let mut r = Sampler::new(seed);
        for v in &first {
            assert_eq!(v.to_bits(), r.next_uniform().to_bits());
        }
        assert!(first.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn adjacent_streams_are_uncorrelated() {
        let n = 100_000;
        for w in [0u64, 1000, 123_456] {
            let mut a = Sampler::new(PathSeed::new(1, w));
            let mut b = Sampler::new(PathSeed::new(1, w + 1));
            let xs: Vec<f64> = (0..n).map(|_| a.next_uniform()).collect();
            let ys: Vec<f64> = (0..n).map(|_| b.next_uniform()).collect();
            let r = pearson(&xs, &ys);
            assert!(r.abs() < 0.01, "walk {w}: r = {r}");
        }
    }

    #[test]
    fn derived_streams_do_not_repeat_parent() {
        let seed = PathSeed::new(4, 4);
        let child = seed.derive(3);
        assert_ne!(seed, child);
        let mut a = Sampler::new(seed);
        let mut b = Sampler::new(child);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn histogram_is_flat() {
        let mut s = Sampler::new(PathSeed::new(99, 0));
        let mut bins = [0u32; 20];
        let n = 200_000;
        for _ in 0..n {
            bins[(s.next_uniform() * 20.0) as usize] += 1;
        }
        let expected = n as f64 / 20.0;
        let chi2: f64 = bins
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9% quantile of chi^2 with 19 dof is 43.8.
        assert!(chi2 < 43.8, "{chi2}");
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        sxy / (sxx * syy).sqrt()
    }
}
