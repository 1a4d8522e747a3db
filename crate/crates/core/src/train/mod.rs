//! Training, evaluation and the experiment drivers built on them.

mod eval;
mod experiments;
mod sgd;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DataConfig;
use crate::error::{Error, Result};
use crate::imaging::augment::{augment, Augment};
use crate::imaging::{Location, Tile};
use crate::nn::{NetConfig, Network, ParameterSet};
use crate::policy::{
    loss_and_grad, random_locations, rollout, AgentKind, BaselineEstimator, Driver, Episode, LossBreakdown, LossMode,
    PolicyConfig,
};
use crate::rng::{derive_seed, fork, StreamRng};
use crate::synthenv::EnvConfig;

pub use eval::{eval_episode, evaluate, hit_rate, EvalReport};
pub use experiments::{
    ablation_table, cmd_train, log_csv, render_table, run_ablations, sweep, sweep_table, AblationRow, SweepAxis, SweepRow,
    TrainArtifacts,
};
pub use sgd::Sgd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoIor,
    NoSc,
    NoContext,
    RandomUniform,
    RandomStain,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoIor,
        Ablation::NoSc,
        Ablation::NoContext,
        Ablation::RandomUniform,
        Ablation::RandomStain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoIor => "no_ior",
            Ablation::NoSc => "no_sc",
            Ablation::NoContext => "no_context",
            Ablation::RandomUniform => "random_uniform",
            Ablation::RandomStain => "random_stain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation `{s}`")))
    }

    /// Switches off the ablated component.
    pub fn apply(self, net: &mut NetConfig, policy: &mut PolicyConfig) {
        match self {
            Ablation::Full => {}
            // removes both the overlap penalty and context suppression
            Ablation::NoIor => policy.ior = false,
            Ablation::NoSc => policy.task_reg = false,
            Ablation::NoContext => net.use_context = false,
            Ablation::RandomUniform => policy.agent = AgentKind::RandomUniform,
            Ablation::RandomStain => policy.agent = AgentKind::RandomStain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Random dihedral transform per training sample.
    pub augment: bool,
    /// Stop once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Seed for evaluation start locations.
    pub eval_seed: u64,
    /// Cap on the L2 norm of the location-path gradient (location head and
    /// context encoder) per update; `None` disables it.
    pub location_clip: Option<f64>,
    /// Stop after the first epoch that ends past this wall-clock budget.
    /// Runs that hit it are no longer reproducible.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            lr_decay: 0.97,
            momentum: 0.9,
            batch_size: 10,
            epochs: 50,
            seed: 0,
            augment: true,
            target_accuracy: None,
            eval_seed: 7,
            location_clip: Some(0.5),
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(c) = self.location_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("location_clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

fn is_location_param(name: &str) -> bool {
    name.starts_with("l.") || name.starts_with("c2.")
}

/// Rescales the location-path gradient so its L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_location_grads(grads: &mut ParameterSet, max: f64) -> f64 {
    let ids: Vec<_> = grads.ids().filter(|&id| is_location_param(&grads.spec(id).name)).collect();
    let norm = ids.iter().map(|&id| grads.get(id).iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max {
        let k = max / norm;
        for id in ids {
            grads.get_mut(id).iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub ablation: Ablation,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub net: NetConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            ablation: Ablation::Full,
            env: EnvConfig::default(),
            data: DataConfig::default(),
            net: NetConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.net.validate()?;
        self.policy.validate()?;
        self.train.validate()?;
        if self.env.tile_size != self.net.tile_size {
            return Err(Error::Config(format!(
                "env tile_size {} differs from net tile_size {}",
                self.env.tile_size, self.net.tile_size
            )));
        }
        Ok(())
    }

    /// Network and policy configurations with the ablation applied.
    pub fn effective(&self) -> (NetConfig, PolicyConfig) {
        let (mut net, mut policy) = (self.net.clone(), self.policy.clone());
        self.ablation.apply(&mut net, &mut policy);
        (net, policy)
    }
}

/// One optimizer step as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub batch_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    /// Per-episode means of the loss terms.
    pub mean_loss: f64,
    pub mean_theta: f64,
    pub mean_sc: f64,
    pub mean_ior: f64,
    pub train_accuracy: f64,
    pub val: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub ablation: Ablation,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub reached_target: bool,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub best: ParameterSet,
    pub last: ParameterSet,
    pub report: TrainReport,
    pub log: Vec<StepLog>,
}

/// Runs one episode for training with the agent selected by `policy`.
pub fn training_episode(
    net: &Network,
    p: &ParameterSet,
    tile: &Tile,
    policy: &PolicyConfig,
    rng: &mut StreamRng,
) -> Result<Episode> {
    use rand::Rng;
    match policy.agent {
        AgentKind::Learned => {
            let first = Location::new(rng.random(), rng.random());
            rollout(net, p, tile, policy, first, Driver::Sample(rng))
        }
        kind => {
            let (locs, fallback) = random_locations(kind, tile, policy.steps, rng);
            let class_rng = (policy.mode == LossMode::Strict).then_some(rng);
            let mut ep = rollout(net, p, tile, policy, locs[0], Driver::Fixed(&locs, class_rng))?;
            ep.fallback = fallback;
            Ok(ep)
        }
    }
}

/// Trains from scratch on `train`, selecting the parameters with the best
/// validation accuracy. Fully determined by `cfg` and the data.
pub fn train(
    cfg: &ExperimentConfig,
    train_set: &[Tile],
    val_set: &[Tile],
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    use rand::seq::SliceRandom;
    use rand::Rng;

    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let (net_cfg, policy) = cfg.effective();
    let tc = &cfg.train;
    let net = Network::new(net_cfg)?;
    let mut params = net.init_params(derive_seed(tc.seed, 1));
    let mut sgd = Sgd::new(&params, tc.momentum);
    let mut baseline = BaselineEstimator::new(policy.steps, policy.baseline_decay);
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY);
    let mut step: u64 = 0;
    let mut reached = false;
    let started = std::time::Instant::now();

    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let mut rng = fork(tc.seed, 1000 + epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let (mut sums, mut correct) = ([0.0f64; 4], 0usize);

        for chunk in order.chunks(tc.batch_size) {
            let mut episodes = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let tile = if tc.augment {
                    let op = Augment::ALL[rng.random_range(0..Augment::ALL.len())];
                    augment(&train_set[i], op)?
                } else {
                    train_set[i].clone()
                };
                let ep = training_episode(&net, &params, &tile, &policy, &mut rng).map_err(|e| numerical(step, e))?;
                episodes.push(ep);
            }
            let mut grads = params.zeros_like();
            let loss = loss_and_grad(&net, &params, &episodes, &policy, &baseline, Some(&mut grads))
                .map_err(|e| numerical(step, e))?;
            if let Some(c) = tc.location_clip {
                clip_location_grads(&mut grads, c);
            }
            sgd.step(&mut params, &grads, lr);
            params.check_finite().map_err(|e| numerical(step, e))?;
            baseline.update(&episodes, policy.gamma);

            let hits = episodes.iter().filter(|e| e.final_prediction() == e.label).count();
            correct += hits;
            let n = episodes.len() as f64;
            for (s, v) in sums.iter_mut().zip([loss.total, loss.theta, loss.sc, loss.ior]) {
                *s += v * n;
            }
            log.push(StepLog { epoch, step, lr, loss, batch_accuracy: hits as f64 / episodes.len() as f64 });
            step += 1;
        }

        let val = evaluate(&net, &params, val_set, &policy, tc.eval_seed)?;
        let n = train_set.len() as f64;
        let summary = EpochSummary {
            epoch,
            lr,
            mean_loss: sums[0] / n,
            mean_theta: sums[1] / n,
            mean_sc: sums[2] / n,
            mean_ior: sums[3] / n,
            train_accuracy: correct as f64 / n,
            val,
        };
        on_epoch(&summary);
        let acc = summary.val.accuracy;
        if acc > best.2 {
            best = (params.clone(), epoch, acc);
        }
        epochs.push(summary);
        if tc.target_accuracy.is_some_and(|t| acc >= t) {
            reached = true;
            break;
        }
        if tc.max_seconds.is_some_and(|m| started.elapsed().as_secs_f64() > m) {
            break;
        }
    }

    let report = TrainReport {
        ablation: cfg.ablation,
        epochs,
        best_epoch: best.1,
        best_val_accuracy: best.2.max(0.0),
        reached_target: reached,
        steps: step,
    };
    Ok(TrainOutcome { net, best: best.0, last: params, report, log })
}

fn numerical(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Numerical { batch: step as usize, detail },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("nope").is_err());
    }

    #[test]
    fn clip_touches_only_the_location_path() {
        let net = Network::new(NetConfig { tile_size: 64, glimpse_size: 8, ..NetConfig::default() }).unwrap();
        let mut g = net.init_params(0).zeros_like();
        g.values_mut().iter_mut().for_each(|v| *v = 1.0);
        let norm = clip_location_grads(&mut g, 0.5);
        assert!(norm > 0.5);
        let mut clipped = 0.0;
        for id in g.ids() {
            let name = &g.spec(id).name;
            if is_location_param(name) {
                clipped += g.get(id).iter().map(|v| v * v).sum::<f64>();
            } else {
                assert!(g.get(id).iter().all(|&v| v == 1.0), "{name} changed");
            }
        }
        assert!((clipped.sqrt() - 0.5).abs() < 1e-12);
        // already inside the cap: untouched
        let before = g.clone();
        clip_location_grads(&mut g, 1.0);
        assert_eq!(g.values(), before.values());
    }

    #[test]
    fn learning_rate_schedule() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(0), 0.001);
        assert!((t.lr_at(2) - 0.001 * 0.97 * 0.97).abs() < 1e-18);
    }

    #[test]
    fn config_toml_round_trip_and_partial() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = ExperimentConfig::from_toml("ablation = \"no_ior\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.ablation, Ablation::NoIor);
        assert_eq!(partial.policy.lambda, 0.04);
        assert!(ExperimentConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
    }

    #[test]
    fn ablations_switch_components() {
        let c = ExperimentConfig { ablation: Ablation::NoContext, ..ExperimentConfig::default() };
        assert!(!c.effective().0.use_context);
        let c = ExperimentConfig { ablation: Ablation::NoIor, ..ExperimentConfig::default() };
        assert!(!c.effective().1.ior);
    }
}
