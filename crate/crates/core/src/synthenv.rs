//! Deterministic synthetic tiles and slides.
//!
//! Each tile is a pale, noisy tissue-like background with nuclei, plus (for
//! scores 1–3) clusters of membrane-like rings in a stain channel. The score is
//! a function of the stained-area fraction and the stain intensity, and the
//! rings sit in one or two compact clusters so that most of the tile carries
//! no diagnostic signal.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{dequantize, quantize, Tile, CHANNELS, CONTEXT_FACTOR};
use crate::rng::{derive_seed, seeded};

pub const NUM_CLASSES: usize = 4;

/// Closed interval `[lo, hi]` (intensity intervals are treated as `[lo, hi)`
/// except the topmost).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn contains_closed(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub tile_size: usize,
    /// Per-class interval of stained-area fraction.
    pub stain_fraction_ranges: [Interval; NUM_CLASSES],
    /// Per-class interval of stain intensity.
    pub stain_intensity_ranges: [Interval; NUM_CLASSES],
    /// Number of ring clusters per stained tile (inclusive bounds).
    pub blob_count_range: (usize, usize),
    /// Inner ring radius in pixels (inclusive bounds).
    pub ring_radius_range: (usize, usize),
    pub ring_thickness: usize,
    /// Rendered stain opacity is `floor + (1 - floor) * intensity` on stained
    /// pixels, so weak stain stays visible above the pixel noise.
    pub stain_opacity_floor: f64,
    pub noise_std: f64,
    /// Fraction of slide tiles carrying an adjacent score.
    pub minority_fraction: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            tile_size: 256,
            stain_fraction_ranges: [
                Interval::new(0.0, 0.0),
                Interval::new(0.02, 0.10),
                Interval::new(0.10, 0.25),
                Interval::new(0.10, 0.35),
            ],
            stain_intensity_ranges: [
                Interval::new(0.0, 0.0),
                Interval::new(0.2, 0.4),
                Interval::new(0.4, 0.7),
                Interval::new(0.7, 1.0),
            ],
            blob_count_range: (1, 2),
            ring_radius_range: (4, 9),
            ring_thickness: 2,
            stain_opacity_floor: 0.15,
            noise_std: 0.01,
            minority_fraction: 0.2,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.tile_size % CONTEXT_FACTOR != 0 {
            return Err(Error::Config(format!("tile_size {} must be a positive multiple of 16", self.tile_size)));
        }
        let all = self.stain_fraction_ranges.iter().chain(self.stain_intensity_ranges.iter());
        for iv in all {
            if !(0.0..=1.0).contains(&iv.lo) || !(0.0..=1.0).contains(&iv.hi) || iv.lo > iv.hi {
                return Err(Error::Config(format!("interval [{}, {}] not inside [0, 1]", iv.lo, iv.hi)));
            }
        }
        let f0 = self.stain_fraction_ranges[0];
        if f0.lo != 0.0 || f0.hi != 0.0 {
            return Err(Error::Config("class 0 must have zero stained fraction".into()));
        }
        for c in 1..NUM_CLASSES {
            if self.stain_fraction_ranges[c].lo <= 0.0 || self.stain_intensity_ranges[c].lo <= 0.0 {
                return Err(Error::Config(format!("class {c} intervals must exclude zero")));
            }
            if self.stain_intensity_ranges[c].lo >= self.stain_intensity_ranges[c].hi {
                return Err(Error::Config(format!("class {c} intensity interval is empty")));
            }
            for d in (c + 1)..NUM_CLASSES {
                let (fa, fb) = (self.stain_fraction_ranges[c], self.stain_fraction_ranges[d]);
                let (ia, ib) = (self.stain_intensity_ranges[c], self.stain_intensity_ranges[d]);
                // intensity intervals are half-open, fractions closed
                let frac_overlap = fa.lo <= fb.hi && fb.lo <= fa.hi;
                let int_overlap = ia.lo < ib.hi && ib.lo < ia.hi;
                if frac_overlap && int_overlap {
                    return Err(Error::Config(format!("class {c} and {d} intervals overlap")));
                }
            }
        }
        let (a, b) = self.blob_count_range;
        if a == 0 || a > b {
            return Err(Error::Config(format!("blob_count_range ({a}, {b}) invalid")));
        }
        let (r0, r1) = self.ring_radius_range;
        if r0 == 0 || r0 > r1 || self.ring_thickness == 0 {
            return Err(Error::Config("ring geometry invalid".into()));
        }
        if !(0.0..1.0).contains(&self.stain_opacity_floor) {
            return Err(Error::Config(format!("stain_opacity_floor {} outside [0, 1)", self.stain_opacity_floor)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and nonnegative".into()));
        }
        if !(0.0..0.5).contains(&self.minority_fraction) {
            return Err(Error::Config(format!(
                "minority_fraction {} must lie in [0, 0.5)",
                self.minority_fraction
            )));
        }
        Ok(())
    }

    fn top_class_by_intensity(&self) -> usize {
        (1..NUM_CLASSES)
            .max_by(|&a, &b| self.stain_intensity_ranges[a].hi.total_cmp(&self.stain_intensity_ranges[b].hi))
            .unwrap_or(1)
    }

    fn intensity_contains(&self, class: usize, v: f64) -> bool {
        let iv = self.stain_intensity_ranges[class];
        if class == self.top_class_by_intensity() {
            iv.contains_closed(v)
        } else {
            v >= iv.lo && v < iv.hi
        }
    }
}

/// Stained fraction and intensity a tile is painted with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainDraw {
    pub fraction: f64,
    pub intensity: f64,
}

const DAB: [f64; CHANNELS] = [0.42, 0.24, 0.09];
const HEMATOXYLIN: [f64; CHANNELS] = [0.38, 0.42, 0.70];

pub fn gen_tile(cfg: &EnvConfig, class: u8, seed: u64) -> Result<Tile> {
    check_class(class)?;
    let draw = if class == 0 {
        StainDraw { fraction: 0.0, intensity: 0.0 }
    } else {
        let mut rng = seeded(derive_seed(seed, 0x5741_u64 + u64::from(class)));
        let f = cfg.stain_fraction_ranges[class as usize];
        let i = cfg.stain_intensity_ranges[class as usize];
        StainDraw { fraction: rng.random_range(f.lo..=f.hi), intensity: rng.random_range(i.lo..i.hi) }
    };
    gen_tile_with(cfg, class, seed, draw)
}

/// Generates a tile whose stain is painted with exactly `draw` (after
/// quantization), bypassing the per-class sampling.
pub fn gen_tile_with(cfg: &EnvConfig, class: u8, seed: u64, draw: StainDraw) -> Result<Tile> {
    check_class(class)?;
    cfg.validate()?;
    let n = cfg.tile_size;
    let area = n * n;
    let mut rng = seeded(derive_seed(seed, u64::from(class)));

    // stain channel
    let mut stain = vec![0u16; area];
    if class > 0 {
        let c = class as usize;
        let q = quantize_into(cfg, c, draw.intensity);
        let fr = cfg.stain_fraction_ranges[c];
        let lo = (fr.lo * area as f64).ceil() as usize;
        let hi = (fr.hi * area as f64).floor() as usize;
        let target = ((draw.fraction * area as f64).round() as usize).clamp(lo.max(1), hi.max(lo.max(1)));
        paint_rings(cfg, &mut rng, &mut stain, q, target);
    }

    // background
    let base: [f64; CHANNELS] = [
        0.86 + rng.random_range(-0.03..0.03),
        0.82 + rng.random_range(-0.03..0.03),
        0.88 + rng.random_range(-0.03..0.03),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.005..0.03),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.01..0.03),
            )
        })
        .collect();
    let mut nuclei = vec![0f64; area];
    let nuclei_count = area / 300;
    for _ in 0..nuclei_count {
        let cy = rng.random_range(0..n) as isize;
        let cx = rng.random_range(0..n) as isize;
        let r = rng.random_range(1.5..3.0f64);
        let strength = rng.random_range(0.4..0.8);
        let ri = r.ceil() as isize;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let (y, x) = (cy + dy, cx + dx);
                if y < 0 || x < 0 || y >= n as isize || x >= n as isize {
                    continue;
                }
                if ((dy * dy + dx * dx) as f64).sqrt() <= r {
                    let p = y as usize * n + x as usize;
                    nuclei[p] = f64::max(nuclei[p], strength);
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let floor = cfg.stain_opacity_floor;
    let mut pixels = Vec::with_capacity(area * CHANNELS);
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let shade: f64 = waves
                .iter()
                .map(|&(freq, py, px, amp)| amp * ((y as f64 * freq + py).sin() * (x as f64 * freq + px).cos()))
                .sum();
            let s = dequantize(stain[p]);
            let s = if s > 0.0 { floor + (1.0 - floor) * s } else { 0.0 };
            for c in 0..CHANNELS {
                let mut v = base[c] + shade;
                v += nuclei[p] * (HEMATOXYLIN[c] - v);
                v += s * (DAB[c] - v);
                if cfg.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                pixels.push(quantize(v));
            }
        }
    }

    let relevance: Vec<bool> = stain.iter().map(|&s| s > 0).collect();
    Tile::new(n, n, pixels, stain, relevance, class, seed)
}

fn check_class(class: u8) -> Result<()> {
    if usize::from(class) >= NUM_CLASSES {
        return Err(Error::invalid(format!("class {class} outside 0..{NUM_CLASSES}")));
    }
    Ok(())
}

/// Quantizes `intensity` to a sample whose dequantized value stays inside the
/// class interval.
fn quantize_into(cfg: &EnvConfig, class: usize, intensity: f64) -> u16 {
    let mut q = quantize(intensity).max(1);
    while !cfg.intensity_contains(class, dequantize(q)) {
        if dequantize(q) < cfg.stain_intensity_ranges[class].lo {
            q += 1;
        } else {
            q -= 1;
        }
    }
    q
}

/// Rasterizes annuli around cluster sites until exactly `target` pixels carry
/// stain `q`. The last ring is cut short to hit the target.
fn paint_rings(cfg: &EnvConfig, rng: &mut impl Rng, stain: &mut [u16], q: u16, target: usize) {
    let n = cfg.tile_size as isize;
    let (kmin, kmax) = cfg.blob_count_range;
    let k = rng.random_range(kmin..=kmax);
    let mut spread = f64::max(20.0, (2.5 * target as f64 / (PI * k as f64)).sqrt());
    let margin = (spread * 0.6).min(n as f64 / 2.0 - 1.0);
    let sites: Vec<(f64, f64)> = (0..k)
        .map(|_| (rng.random_range(margin..n as f64 - margin), rng.random_range(margin..n as f64 - margin)))
        .collect();

    let (rmin, rmax) = cfg.ring_radius_range;
    let th = cfg.ring_thickness as f64;
    let mut painted = 0usize;
    let mut rings = 0usize;
    while painted < target {
        rings += 1;
        if rings % 500 == 0 {
            spread *= 1.25;
        }
        let (sy, sx) = sites[rings % k];
        let ang = rng.random_range(0.0..2.0 * PI);
        let rad = spread * rng.random::<f64>().sqrt();
        let cy = sy + rad * ang.sin();
        let cx = sx + rad * ang.cos();
        let r = rng.random_range(rmin..=rmax) as f64;
        let outer = r + th;
        let (y0, y1) = ((cy - outer).floor() as isize, (cy + outer).ceil() as isize);
        let (x0, x1) = ((cx - outer).floor() as isize, (cx + outer).ceil() as isize);
        'ring: for y in y0.max(0)..=y1.min(n - 1) {
            for x in x0.max(0)..=x1.min(n - 1) {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                if d >= r && d < outer {
                    let p = (y * n + x) as usize;
                    if stain[p] == 0 {
                        stain[p] = q;
                        painted += 1;
                        if painted == target {
                            break 'ring;
                        }
                    }
                }
            }
        }
    }
}

/// Measured `(stained fraction, mean stain intensity over stained pixels)`.
pub fn measure_stain(tile: &Tile) -> (f64, f64) {
    let stain = tile.raw_stain();
    let (count, sum) = stain
        .iter()
        .filter(|&&s| s > 0)
        .fold((0usize, 0.0), |(c, s), &v| (c + 1, s + dequantize(v)));
    if count == 0 {
        return (0.0, 0.0);
    }
    (count as f64 / stain.len() as f64, sum / count as f64)
}

/// Recovers the score from measured stain statistics.
pub fn label_oracle(cfg: &EnvConfig, tile: &Tile) -> Result<u8> {
    let (fraction, intensity) = measure_stain(tile);
    if fraction == 0.0 {
        return Ok(0);
    }
    let eps = 1e-12;
    for c in 1..NUM_CLASSES {
        let fr = cfg.stain_fraction_ranges[c];
        if fraction >= fr.lo - eps && fraction <= fr.hi + eps && cfg.intensity_contains(c, intensity) {
            return Ok(c as u8);
        }
    }
    Err(Error::Data(format!(
        "stain fraction {fraction:.6} / intensity {intensity:.6} matches no class interval"
    )))
}

/// Fraction of pixels that look like tissue rather than empty glass.
pub fn tissue_fraction(tile: &Tile) -> f64 {
    let (h, w) = (tile.height(), tile.width());
    let tissue = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| (0..CHANNELS).map(|c| tile.pixel(y, x, c)).sum::<f64>() / (CHANNELS as f64) < 0.95)
        .count();
    tissue as f64 / (h * w) as f64
}

/// A grid of tiles standing in for a whole slide.
#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub tiles: Vec<Tile>,
    pub slide_label: u8,
    pub tissue_fraction: Vec<f64>,
}

pub fn gen_slide(cfg: &EnvConfig, class: u8, rows: usize, cols: usize, seed: u64) -> Result<SyntheticSlide> {
    check_class(class)?;
    cfg.validate()?;
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("slide needs at least one row and column"));
    }
    let count = rows * cols;
    let minority = (count as f64 * cfg.minority_fraction).round() as usize;
    let mut rng = seeded(derive_seed(seed, 0x511D_E));
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![class; count];
    for &i in &order[..minority] {
        labels[i] = match class {
            0 => 1,
            3 => 2,
            c => {
                if rng.random::<bool>() {
                    c + 1
                } else {
                    c - 1
                }
            }
        };
    }
    let tiles = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| gen_tile(cfg, l, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let tissue_fraction = tiles.iter().map(tissue_fraction).collect();
    Ok(SyntheticSlide { rows, cols, tiles, slide_label: class, tissue_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EnvConfig {
        EnvConfig { tile_size: 64, ..EnvConfig::default() }
    }

    #[test]
    fn default_config_is_valid() {
        EnvConfig::default().validate().unwrap();
    }

    #[test]
    fn overlapping_classes_are_rejected() {
        let mut cfg = EnvConfig::default();
        cfg.stain_intensity_ranges[2] = Interval::new(0.3, 0.7);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn class_zero_has_no_stain() {
        let t = gen_tile(&EnvConfig::default(), 0, 11).unwrap();
        assert!(t.raw_stain().iter().all(|&s| s == 0));
        assert_eq!(t.relevant_count(), 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = EnvConfig::default();
        assert_eq!(gen_tile(&cfg, 2, 5).unwrap(), gen_tile(&cfg, 2, 5).unwrap());
        assert_ne!(gen_tile(&cfg, 2, 5).unwrap(), gen_tile(&cfg, 2, 6).unwrap());
    }

    #[test]
    fn class_three_fraction_within_interval() {
        let cfg = EnvConfig::default();
        for seed in 0..5 {
            let t = gen_tile(&cfg, 3, seed).unwrap();
            let stained = t.raw_stain().iter().filter(|&&s| s > 0).count();
            let frac = stained as f64 / (256.0 * 256.0);
            assert!((0.10..=0.35).contains(&frac), "fraction {frac}");
        }
    }

    #[test]
    fn oracle_recovers_generator_label() {
        let cfg = small();
        for class in 0..4u8 {
            for seed in 0..25 {
                let t = gen_tile(&cfg, class, seed).unwrap();
                assert_eq!(label_oracle(&cfg, &t).unwrap(), class);
            }
        }
    }

    #[test]
    fn oracle_on_midpoints() {
        let cfg = EnvConfig::default();
        let draw = StainDraw {
            fraction: cfg.stain_fraction_ranges[2].midpoint(),
            intensity: cfg.stain_intensity_ranges[2].midpoint(),
        };
        let t = gen_tile_with(&cfg, 2, 3, draw).unwrap();
        assert_eq!(label_oracle(&cfg, &t).unwrap(), 2);
        let (f, i) = measure_stain(&t);
        assert!((f - 0.175).abs() < 1.0 / 65536.0);
        assert!((i - 0.55).abs() < 1.0 / 65535.0);
    }

    #[test]
    fn rejects_bad_class() {
        assert!(gen_tile(&small(), 4, 0).is_err());
    }

    #[test]
    fn slide_minority_counts() {
        let mut cfg = small();
        cfg.minority_fraction = 0.0;
        let s = gen_slide(&cfg, 2, 2, 3, 1).unwrap();
        assert!(s.tiles.iter().all(|t| t.label() == 2));

        let one = gen_slide(&small(), 1, 1, 1, 4).unwrap();
        assert_eq!(one.tiles[0].label(), one.slide_label);

        let s = gen_slide(&small(), 2, 4, 4, 9).unwrap();
        let minority = s.tiles.iter().filter(|t| t.label() != 2).count();
        assert_eq!(minority, 3);
        assert!(s.tiles.iter().all(|t| t.label().abs_diff(2) <= 1));
        assert!(s.tissue_fraction.iter().all(|&f| f > 0.9));
    }

    #[test]
    fn minority_at_half_rejected() {
        let mut cfg = small();
        cfg.minority_fraction = 0.5;
        assert!(gen_slide(&cfg, 1, 2, 2, 0).is_err());
    }
}
