//! Scripted baselines that pick glimpse locations without the location head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::{Location, Tile};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Learned,
    /// Independent uniform locations.
    RandomUniform,
    /// Uniform over strongly stained pixels in sizeable components.
    RandomStain,
}

pub const STAIN_THRESHOLD: f64 = 0.8;
pub const MIN_COMPONENT: usize = 16;

/// Pixels `(y, x)` with stain above the threshold that belong to a
/// 4-connected component of at least [`MIN_COMPONENT`] such pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct StainCandidates {
    pub pixels: Vec<(usize, usize)>,
}

pub fn stain_candidates(tile: &Tile, threshold: f64, min_component: usize) -> StainCandidates {
    let (h, w) = (tile.height(), tile.width());
    let strong: Vec<bool> = (0..h * w).map(|i| tile.stain_at(i / w, i % w) > threshold).collect();
    let mut seen = vec![false; h * w];
    let mut pixels = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !strong[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if strong[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if comp.len() >= min_component {
            pixels.extend(comp);
        }
    }
    pixels.sort_unstable();
    StainCandidates { pixels: pixels.into_iter().map(|i| (i / w, i % w)).collect() }
}

/// Draws `steps` locations for a scripted agent. The flag reports a fallback
/// from stain-seeking to uniform because no candidate pixel exists.
pub fn random_locations(kind: AgentKind, tile: &Tile, steps: usize, rng: &mut StreamRng) -> (Vec<Location>, bool) {
    let uniform = |rng: &mut StreamRng| (0..steps).map(|_| Location::new(rng.random(), rng.random())).collect();
    match kind {
        AgentKind::RandomStain => {
            let cands = stain_candidates(tile, STAIN_THRESHOLD, MIN_COMPONENT);
            if cands.pixels.is_empty() {
                return (uniform(rng), true);
            }
            let (sy, sx) = ((tile.height() - 1) as f64, (tile.width() - 1) as f64);
            let locs = (0..steps)
                .map(|_| {
                    let (y, x) = cands.pixels[rng.random_range(0..cands.pixels.len())];
                    Location::new(x as f64 / sx, y as f64 / sy)
                })
                .collect();
            (locs, false)
        }
        _ => (uniform(rng), false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::quantize;
    use crate::rng::seeded;

    fn tile_with_stain(f: impl Fn(usize, usize) -> f64) -> Tile {
        let n = 32;
        let stain: Vec<u16> = (0..n * n).map(|i| quantize(f(i / n, i % n))).collect();
        let relevance = stain.iter().map(|&s| s > 0).collect();
        Tile::new(n, n, vec![0; n * n * 3], stain, relevance, 3, 0).unwrap()
    }

    #[test]
    fn small_components_are_dropped() {
        // a 5x5 block (25 px) and a 3x3 block (9 px)
        let t = tile_with_stain(|y, x| {
            if (2..7).contains(&y) && (2..7).contains(&x) || (20..23).contains(&y) && (20..23).contains(&x) {
                0.9
            } else {
                0.0
            }
        });
        let c = stain_candidates(&t, STAIN_THRESHOLD, MIN_COMPONENT);
        assert_eq!(c.pixels.len(), 25);
        assert!(c.pixels.iter().all(|&(y, x)| y < 7 && x < 7));
    }

    #[test]
    fn stain_agent_lands_on_candidates_or_falls_back() {
        let t = tile_with_stain(|y, x| if y < 8 && x < 8 { 0.95 } else { 0.0 });
        let (locs, fb) = random_locations(AgentKind::RandomStain, &t, 20, &mut seeded(1));
        assert!(!fb);
        for l in locs {
            assert!(t.stain_at((l.y * 31.0).round() as usize, (l.x * 31.0).round() as usize) > 0.8);
        }
        let blank = tile_with_stain(|_, _| 0.5);
        let (locs, fb) = random_locations(AgentKind::RandomStain, &blank, 4, &mut seeded(1));
        assert!(fb);
        assert_eq!(locs.len(), 4);
    }
}
