//! Episodes of the attention agent: rollout, rewards, losses and baselines.

pub mod agents;
pub mod bandit;
pub mod ior;
pub mod loss;

use ndarray::Array1;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{extract_glimpse, make_context, suppress_in_place, Location, Tile};
use crate::nn::{Network, ParameterSet, StepCache};
use crate::rng::StreamRng;

pub use agents::{random_locations, stain_candidates, AgentKind, StainCandidates};
pub use ior::{ior_penalty, ior_penalty_grad, Footprint};
pub use loss::{loss_and_grad, LossBreakdown};

/// How classification enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy on every step's class probabilities; REINFORCE for locations only.
    Hybrid,
    /// Class decisions are sampled and trained with REINFORCE as well.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Glimpses per episode.
    pub steps: usize,
    /// Standard deviation of the Gaussian location policy.
    pub sigma: f64,
    pub gamma: f64,
    /// Weight of the regularizers in the combined loss.
    pub lambda: f64,
    pub baseline_decay: f64,
    pub mode: LossMode,
    /// Context suppression and the overlap penalty.
    pub ior: bool,
    pub task_reg: bool,
    pub agent: AgentKind,
    /// Keep location-policy gradients out of the recurrent core.
    pub detach_location: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            steps: 6,
            sigma: 0.1,
            gamma: 1.0,
            lambda: 0.04,
            baseline_decay: 0.9,
            mode: LossMode::Hybrid,
            ior: true,
            task_reg: true,
            agent: AgentKind::Learned,
            detach_location: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be positive", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad(format!("baseline_decay {} outside [0, 1)", self.baseline_decay));
        }
        Ok(())
    }
}

/// One stochastic location decision `l_{t+1} = clamp(μ_t + σ ε_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub mean: [f64; 2],
    pub eps: [f64; 2],
    /// Unclamped sample `μ_t + σ ε_t`.
    pub raw: [f64; 2],
}

impl Decision {
    pub fn location(&self) -> Location {
        Location::new(self.raw[0], self.raw[1])
    }

    /// `clamp(μ + σ ε)`; equals [`Decision::location`] when freshly sampled.
    pub fn pathwise(&self, sigma: f64) -> Location {
        Location::new(self.mean[0] + sigma * self.eps[0], self.mean[1] + sigma * self.eps[1])
    }

    /// Whether the clamp is inactive on each axis (the pathwise derivative is 1).
    pub fn interior(&self, sigma: f64) -> [bool; 2] {
        [0, 1].map(|i| {
            let v = self.mean[i] + sigma * self.eps[i];
            v > 0.0 && v < 1.0
        })
    }
}

/// A recorded episode. The tape holds everything backpropagation needs.
#[derive(Debug, Clone)]
pub struct Episode {
    pub label: u8,
    pub locations: Vec<Location>,
    /// `T - 1` decisions for the learned agent, empty for scripted agents.
    pub decisions: Vec<Decision>,
    pub probs: Vec<Array1<f64>>,
    pub predictions: Vec<u8>,
    /// Whether each glimpse's fine footprint covers a relevant pixel.
    pub hits: Vec<bool>,
    /// Set when a stain-seeking agent found no candidates and fell back to uniform.
    pub fallback: bool,
    pub(crate) tape: Vec<StepCache>,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.locations.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.predictions.iter().map(|&p| f64::from(p == self.label)).collect()
    }

    /// Reward-to-go `R_t = Σ_{k≥t} γ^{k-t} r_k`.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        episode_return(&self.rewards(), gamma)
    }

    pub fn final_prediction(&self) -> u8 {
        *self.predictions.last().expect("non-empty episode")
    }

    pub fn final_probs(&self) -> &Array1<f64> {
        self.probs.last().expect("non-empty episode")
    }

    /// Locations the overlap penalty sees: the first glimpse plus each
    /// decision's pathwise location `clamp(μ + σ ε)` (identical to `locations`
    /// for recorded runs).
    pub fn penalty_locations(&self, sigma: f64) -> Vec<Location> {
        if self.decisions.is_empty() {
            return self.locations.clone();
        }
        std::iter::once(self.locations[0]).chain(self.decisions.iter().map(|d| d.pathwise(sigma))).collect()
    }
}

pub fn episode_return(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(p: &Array1<f64>) -> u8 {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best as u8
}

/// Where the next location comes from.
pub enum Driver<'a> {
    /// Sample from the Gaussian policy (and, in strict mode, the class head).
    Sample(&'a mut StreamRng),
    /// Follow the mean; predictions are argmax.
    Greedy,
    /// Re-run with the recorded locations, noise and predictions of an episode.
    Replay(&'a Episode),
    /// Scripted locations; predictions are sampled in strict mode when an rng is given.
    Fixed(&'a [Location], Option<&'a mut StreamRng>),
}

/// Runs one episode of `cfg.steps` glimpses starting at `first`.
pub fn rollout(
    net: &Network,
    p: &ParameterSet,
    tile: &Tile,
    cfg: &PolicyConfig,
    first: Location,
    mut driver: Driver<'_>,
) -> Result<Episode> {
    let t_max = cfg.steps;
    let w = net.config().glimpse_size;
    if tile.height() != net.config().tile_size || tile.width() != net.config().tile_size {
        return Err(Error::shape(format!(
            "tile {}x{} does not match network tile size {}",
            tile.height(),
            tile.width(),
            net.config().tile_size
        )));
    }
    let scripted = match &driver {
        Driver::Fixed(locs, _) => {
            if locs.len() != t_max {
                return Err(Error::invalid(format!("{} scripted locations for {t_max} steps", locs.len())));
            }
            true
        }
        Driver::Replay(ep) => {
            if ep.steps() != t_max {
                return Err(Error::invalid(format!("replaying {} steps as {t_max}", ep.steps())));
            }
            ep.decisions.is_empty()
        }
        _ => false,
    };
    let first = match &driver {
        Driver::Fixed(locs, _) => locs[0],
        Driver::Replay(ep) => ep.locations[0],
        _ => first,
    };

    let mut ctx = if scripted { None } else { Some(make_context(tile)?) };
    let mut state = net.zero_state();
    let mut loc = first;
    let mut ep = Episode {
        label: tile.label(),
        locations: Vec::with_capacity(t_max),
        decisions: Vec::with_capacity(t_max.saturating_sub(1)),
        probs: Vec::with_capacity(t_max),
        predictions: Vec::with_capacity(t_max),
        hits: Vec::with_capacity(t_max),
        fallback: false,
        tape: Vec::with_capacity(t_max),
    };

    for t in 0..t_max {
        let last = t + 1 == t_max;
        let glimpse = extract_glimpse(tile, loc, w)?;
        ep.locations.push(loc);
        ep.hits.push(tile.footprint_hits_mask(loc, w));
        if let (Some(c), true) = (ctx.as_mut(), cfg.ior && !last) {
            suppress_in_place(c, loc, w);
        }
        let ctx_in = if last { None } else { ctx.as_ref() };
        let (out, cache) = net.step(p, &glimpse, ctx_in, &state)?;
        if !out.probs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("class probabilities at step {}", t + 1)));
        }

        let pred = match &mut driver {
            Driver::Sample(rng) | Driver::Fixed(_, Some(rng)) if cfg.mode == LossMode::Strict => {
                WeightedIndex::new(out.probs.iter().copied())
                    .map_err(|e| Error::NonFinite(format!("class sampling: {e}")))?
                    .sample(*rng) as u8
            }
            Driver::Replay(rec) => rec.predictions[t],
            _ => argmax(&out.probs),
        };

        if !last {
            loc = match &mut driver {
                Driver::Fixed(locs, _) => locs[t + 1],
                Driver::Replay(rec) if scripted => rec.locations[t + 1],
                _ => {
                    let mean = out.mean.expect("location head ran");
                    if !mean.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite(format!("location mean at step {}", t + 1)));
                    }
                    let eps = match &mut driver {
                        Driver::Sample(rng) => [rng.sample(StandardNormal), rng.sample(StandardNormal)],
                        Driver::Replay(rec) => rec.decisions[t].eps,
                        _ => [0.0, 0.0],
                    };
                    let raw = match &driver {
                        // keep the recorded sample so the log-density sees the same action
                        Driver::Replay(rec) => rec.decisions[t].raw,
                        _ => [0, 1].map(|i| mean[i] + cfg.sigma * eps[i]),
                    };
                    let d = Decision { mean, eps, raw };
                    ep.decisions.push(d);
                    match &driver {
                        Driver::Replay(rec) => rec.locations[t + 1],
                        _ => d.location(),
                    }
                }
            };
        }

        ep.probs.push(out.probs);
        ep.predictions.push(pred);
        ep.tape.push(cache);
        state = out.state;
    }
    Ok(ep)
}

/// Running per-step reward baselines `b ← d·b + (1-d)·mean(R)`, starting at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEstimator {
    pub decay: f64,
    /// One entry per location decision (compared with `R_{t+1}`).
    pub location: Vec<f64>,
    /// One entry per class decision (compared with `R_t`); used in strict mode.
    pub class: Vec<f64>,
}

impl BaselineEstimator {
    pub fn new(steps: usize, decay: f64) -> Self {
        BaselineEstimator { decay, location: vec![0.0; steps.saturating_sub(1)], class: vec![0.0; steps] }
    }

    pub fn update(&mut self, episodes: &[Episode], gamma: f64) {
        if episodes.is_empty() {
            return;
        }
        let n = episodes.len() as f64;
        let returns: Vec<Vec<f64>> = episodes.iter().map(|e| e.returns(gamma)).collect();
        let d = self.decay;
        for (t, b) in self.class.iter_mut().enumerate() {
            let m = returns.iter().map(|r| r[t]).sum::<f64>() / n;
            *b = d * *b + (1.0 - d) * m;
        }
        for (t, b) in self.location.iter_mut().enumerate() {
            let m = returns.iter().map(|r| r[t + 1]).sum::<f64>() / n;
            *b = d * *b + (1.0 - d) * m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetConfig;
    use crate::rng::seeded;
    use crate::synthenv::{gen_tile, EnvConfig};

    fn small() -> (Network, ParameterSet, Tile) {
        let net = Network::new(NetConfig {
            tile_size: 64,
            glimpse_size: 8,
            stem_channels: 2,
            stage_channels: 2,
            branch_features: 3,
            context_features: 4,
            hidden1: 5,
            hidden2: 4,
            init: crate::nn::InitScheme::Fixed,
            init_std: 0.5,
            ..NetConfig::default()
        })
        .unwrap();
        let p = net.init_params(1);
        let tile = gen_tile(&EnvConfig { tile_size: 64, ..EnvConfig::default() }, 2, 9).unwrap();
        (net, p, tile)
    }

    #[test]
    fn returns_accumulate_backwards() {
        assert_eq!(episode_return(&[1.0, 0.0, 1.0], 1.0), vec![2.0, 1.0, 1.0]);
        assert_eq!(episode_return(&[1.0, 0.0, 1.0], 0.5), vec![1.25, 0.5, 1.0]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&ndarray::array![0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&ndarray::array![0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn sampled_episode_is_reproducible_and_replays_exactly() {
        let (net, p, tile) = small();
        let cfg = PolicyConfig::default();
        let a = rollout(&net, &p, &tile, &cfg, Location::new(0.2, 0.3), Driver::Sample(&mut seeded(5))).unwrap();
        let b = rollout(&net, &p, &tile, &cfg, Location::new(0.2, 0.3), Driver::Sample(&mut seeded(5))).unwrap();
        assert_eq!(a.locations, b.locations);
        assert_eq!(a.decisions, b.decisions);
        assert_eq!(a.steps(), 6);
        assert_eq!(a.decisions.len(), 5);
        let r = rollout(&net, &p, &tile, &cfg, Location::new(0.9, 0.9), Driver::Replay(&a)).unwrap();
        assert_eq!(r.locations, a.locations);
        assert_eq!(r.decisions, a.decisions);
        assert_eq!(r.probs, a.probs);
    }

    #[test]
    fn greedy_follows_the_mean() {
        let (net, p, tile) = small();
        let cfg = PolicyConfig::default();
        let e = rollout(&net, &p, &tile, &cfg, Location::new(0.5, 0.5), Driver::Greedy).unwrap();
        for (t, d) in e.decisions.iter().enumerate() {
            assert_eq!(e.locations[t + 1], Location::new(d.mean[0], d.mean[1]));
        }
    }

    #[test]
    fn baseline_tracks_returns() {
        let (net, p, tile) = small();
        let cfg = PolicyConfig::default();
        let e = rollout(&net, &p, &tile, &cfg, Location::new(0.5, 0.5), Driver::Greedy).unwrap();
        let mut b = BaselineEstimator::new(6, 0.9);
        b.update(std::slice::from_ref(&e), 1.0);
        let r = e.returns(1.0);
        assert!((b.class[0] - 0.1 * r[0]).abs() < 1e-15);
        assert!((b.location[0] - 0.1 * r[1]).abs() < 1e-15);
    }

    #[test]
    fn wrong_tile_size_rejected() {
        let (net, p, _) = small();
        let tile = gen_tile(&EnvConfig { tile_size: 128, ..EnvConfig::default() }, 1, 1).unwrap();
        assert!(rollout(&net, &p, &tile, &PolicyConfig::default(), Location::new(0.5, 0.5), Driver::Greedy).is_err());
    }
}
