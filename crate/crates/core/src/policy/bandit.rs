//! A one-step Gaussian bandit with a box reward, used to check the
//! score-function estimator against its closed-form gradient.

use rand::Rng;
use rand_distr::StandardNormal;

use super::loss::gaussian_score;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxBandit {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub sigma: f64,
}

impl BoxBandit {
    pub fn reward(&self, a: [f64; 2]) -> f64 {
        f64::from((0..2).all(|i| a[i] >= self.lo[i] && a[i] <= self.hi[i]))
    }

    /// Per-episode score-function estimates `R · ∇_mean log π(a)` for `n` episodes.
    pub fn reinforce_samples(&self, mean: [f64; 2], n: usize, rng: &mut StreamRng) -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| {
                let a = [0, 1].map(|i| mean[i] + self.sigma * rng.sample::<f64, _>(StandardNormal));
                let score = gaussian_score(a, mean, self.sigma);
                let r = self.reward(a);
                [r * score[0], r * score[1]]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn reward_is_an_indicator() {
        let b = BoxBandit { lo: [0.4, 0.2], hi: [0.6, 0.5], sigma: 0.1 };
        assert_eq!(b.reward([0.5, 0.3]), 1.0);
        assert_eq!(b.reward([0.5, 0.6]), 0.0);
        let s = b.reinforce_samples([0.5, 0.35], 100, &mut seeded(1));
        assert_eq!(s.len(), 100);
        assert!(s.iter().all(|g| g[0].is_finite() && g[1].is_finite()));
    }
}
