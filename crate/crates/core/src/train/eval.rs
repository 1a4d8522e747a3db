use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::{Location, Tile};
use crate::nn::{Network, ParameterSet};
use crate::policy::{ior_penalty, random_locations, rollout, AgentKind, Driver, Episode, Footprint, PolicyConfig};
use crate::rng::fork;
use crate::synthenv::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tiles: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    /// Fraction of agent-chosen glimpses (all but the first) whose fine
    /// footprint covers a relevant pixel, over tiles that have any.
    pub hit_rate: f64,
    pub hit_glimpses: usize,
    pub mean_ior: f64,
    /// Episodes where a stain-seeking agent fell back to uniform sampling.
    pub fallbacks: usize,
}

/// `(hits, glimpses)` over the agent-chosen glimpses of one episode.
pub fn hit_rate(ep: &Episode) -> (usize, usize) {
    let chosen = if ep.hits.len() > 1 { &ep.hits[1..] } else { &ep.hits[..] };
    (chosen.iter().filter(|&&h| h).count(), chosen.len())
}

/// The evaluation episode of the `index`-th tile: the learned agent follows
/// its mean from a seeded start, scripted agents draw from a seeded stream.
/// The flag reports a scripted fallback to uniform locations.
pub fn eval_episode(
    net: &Network,
    p: &ParameterSet,
    tile: &Tile,
    policy: &PolicyConfig,
    seed: u64,
    index: u64,
) -> Result<(Episode, bool)> {
    use rand::Rng;
    let mut rng = fork(seed, index);
    match policy.agent {
        AgentKind::Learned => {
            let first = Location::new(rng.random(), rng.random());
            Ok((rollout(net, p, tile, policy, first, Driver::Greedy)?, false))
        }
        kind => {
            let (locs, fb) = random_locations(kind, tile, policy.steps, &mut rng);
            Ok((rollout(net, p, tile, policy, locs[0], Driver::Fixed(&locs, None))?, fb))
        }
    }
}

/// Deterministic evaluation over `tiles` with [`eval_episode`].
pub fn evaluate(net: &Network, p: &ParameterSet, tiles: &[Tile], policy: &PolicyConfig, seed: u64) -> Result<EvalReport> {
    let fp = Footprint {
        tile_height: net.config().tile_size,
        tile_width: net.config().tile_size,
        window: net.config().glimpse_size,
    };
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    let (mut hits, mut glimpses, mut ior, mut fallbacks) = (0, 0, 0.0, 0);
    for (i, tile) in tiles.iter().enumerate() {
        let (ep, fb) = eval_episode(net, p, tile, policy, seed, i as u64)?;
        fallbacks += usize::from(fb);
        confusion[tile.label() as usize][ep.final_prediction() as usize] += 1;
        if tile.relevant_count() > 0 {
            let (h, g) = hit_rate(&ep);
            hits += h;
            glimpses += g;
        }
        ior += ior_penalty(&ep.locations, fp);
    }
    let n = tiles.len();
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    Ok(EvalReport {
        tiles: n,
        accuracy: ratio(correct as f64, n),
        per_class_accuracy,
        confusion,
        hit_rate: ratio(hits as f64, glimpses),
        hit_glimpses: glimpses,
        mean_ior: ratio(ior, n),
        fallbacks,
    })
}
