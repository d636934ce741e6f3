use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Distributions available to [`SeededRng::sample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dist {
    Normal,
    Gumbel,
    Uniform,
}

const UNIT_CLIP: f64 = 1e-12;

/// ChaCha8-backed generator. The stream depends only on the seed, so runs are
/// reproducible across platforms.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for sub-stream `key`; does not advance `self`.
    pub fn fork(&self, key: u64) -> SeededRng {
        SeededRng::new(mix_seed(self.seed ^ mix_seed(key)))
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Standard Gumbel via `-ln(-ln u)`, with `u` clipped away from 0 and 1.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(UNIT_CLIP, 1.0 - UNIT_CLIP);
        -(-u.ln()).ln()
    }

    /// Exponential with the given rate.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        let u = self.uniform().clamp(UNIT_CLIP, 1.0 - UNIT_CLIP);
        -u.ln() / rate
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn sample(&mut self, dist: Dist, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| match dist {
                Dist::Normal => self.normal(),
                Dist::Gumbel => self.gumbel(),
                Dist::Uniform => self.uniform(),
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(t: &Tensor) -> (f64, f64) {
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn same_seed_same_stream() {
        let a = SeededRng::new(11).sample(Dist::Normal, &[4, 5]);
        let b = SeededRng::new(11).sample(Dist::Normal, &[4, 5]);
        assert_eq!(a, b);
        let c = SeededRng::new(12).sample(Dist::Normal, &[4, 5]);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments() {
        let t = SeededRng::new(3).sample(Dist::Normal, &[100_000]);
        let (m, v) = moments(&t);
        assert!(m.abs() <= 0.02, "mean {m}");
        assert!((0.95..=1.05).contains(&v), "var {v}");
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let t = SeededRng::new(5).sample(Dist::Gumbel, &[100_000]);
        let (m, _) = moments(&t);
        assert!((m - 0.577_215_664_9).abs() <= 0.02, "mean {m}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let t = SeededRng::new(9).sample(Dist::Uniform, &[10_000]);
        assert!(t.data().iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn forks_are_independent_of_parent_position() {
        let mut parent = SeededRng::new(21);
        let f1 = parent.fork(4).sample(Dist::Uniform, &[3]);
        parent.uniform();
        let f2 = parent.fork(4).sample(Dist::Uniform, &[3]);
        assert_eq!(f1, f2);
    }
}
