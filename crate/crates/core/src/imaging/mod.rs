//! Tiles, locations and the multi-resolution views the agent observes.
//!
//! Pixel and stain samples are stored as 16-bit integers so that raster
//! round-trips are bit-exact; every accessor hands out `f64` in `[0, 1]`.

pub mod augment;
pub mod overlay;
pub mod raster;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, Augment};

/// Number of colour channels in every tile.
pub const CHANNELS: usize = 3;

/// Downsampling factor between a tile and its context image.
pub const CONTEXT_FACTOR: usize = 16;

const SAMPLE_MAX: f64 = 65535.0;

/// Quantizes a real in `[0, 1]` to a 16-bit sample (values outside are clamped).
pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * SAMPLE_MAX).round() as u16
}

#[inline]
pub fn dequantize(q: u16) -> f64 {
    f64::from(q) / SAMPLE_MAX
}

/// An H×W×3 image tile with its ground-truth score, diagnostic-stain channel
/// and relevance mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    height: usize,
    width: usize,
    /// Row-major, channel-interleaved samples.
    pixels: Vec<u16>,
    stain: Vec<u16>,
    relevance: Vec<bool>,
    label: u8,
    seed: u64,
}

impl Tile {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<u16>,
        stain: Vec<u16>,
        relevance: Vec<bool>,
        label: u8,
        seed: u64,
    ) -> Result<Self> {
        if height == 0 || width == 0 || height % CONTEXT_FACTOR != 0 || width % CONTEXT_FACTOR != 0 {
            return Err(Error::shape(format!(
                "tile dimensions {height}x{width} must be positive multiples of {CONTEXT_FACTOR}"
            )));
        }
        let n = height * width;
        if pixels.len() != n * CHANNELS {
            return Err(Error::shape(format!(
                "pixel buffer has {} samples, expected {}",
                pixels.len(),
                n * CHANNELS
            )));
        }
        if stain.len() != n {
            return Err(Error::shape(format!("stain channel has {} samples, expected {n}", stain.len())));
        }
        if relevance.len() != n {
            return Err(Error::shape(format!("relevance mask has {} entries, expected {n}", relevance.len())));
        }
        if label > 3 {
            return Err(Error::invalid(format!("label {label} outside 0..=3")));
        }
        Ok(Tile { height, width, pixels, stain, relevance, label, seed })
    }

    /// Builds a tile from real-valued closures; samples are quantized to 16 bits.
    /// The stain channel is zero and the relevance mask empty.
    pub fn from_fn(
        height: usize,
        width: usize,
        label: u8,
        seed: u64,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    pixels.push(quantize(f(y, x, c)));
                }
            }
        }
        Tile::new(height, width, pixels, vec![0; height * width], vec![false; height * width], label, seed)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        dequantize(self.pixels[(y * self.width + x) * CHANNELS + c])
    }

    #[inline]
    pub fn stain_at(&self, y: usize, x: usize) -> f64 {
        dequantize(self.stain[y * self.width + x])
    }

    #[inline]
    pub fn is_relevant(&self, y: usize, x: usize) -> bool {
        self.relevance[y * self.width + x]
    }

    pub fn raw_pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn raw_stain(&self) -> &[u16] {
        &self.stain
    }

    pub fn relevance(&self) -> &[bool] {
        &self.relevance
    }

    pub fn relevant_count(&self) -> usize {
        self.relevance.iter().filter(|&&r| r).count()
    }

    /// Returns true when any pixel of the `w`×`w` fine footprint at `center`
    /// belongs to the relevance mask.
    pub fn footprint_hits_mask(&self, center: Location, w: usize) -> bool {
        let w = w.min(self.width).min(self.height);
        let x0 = window_origin(center.x, self.width, w);
        let y0 = window_origin(center.y, self.height, w);
        (y0..y0 + w).any(|y| (x0..x0 + w).any(|x| self.is_relevant(y, x)))
    }
}

/// Normalized coordinates in `[0, 1]²`; `(0, 0)` is the top-left pixel centre
/// and `(1, 1)` the bottom-right one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    /// Clamps both coordinates into `[0, 1]`. NaN maps to the centre.
    pub fn new(x: f64, y: f64) -> Self {
        let fix = |v: f64| if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
        Location { x: fix(x), y: fix(y) }
    }
}

/// First pixel index of a `window`-wide crop centred at normalized `center`
/// along an axis of `extent` pixels, shifted inward so it lies inside the axis.
pub fn window_origin(center: f64, extent: usize, window: usize) -> usize {
    debug_assert!(window <= extent);
    let c = (center * (extent - 1) as f64).round() as isize;
    let start = c - (window / 2) as isize;
    start.clamp(0, (extent - window) as isize) as usize
}

/// Continuous counterpart of [`window_origin`], used where the footprint must
/// vary smoothly with the location. Agrees with it whenever
/// `center * (extent - 1)` is an integer.
pub fn window_origin_continuous(center: f64, extent: usize, window: usize) -> f64 {
    let start = center * (extent - 1) as f64 - (window / 2) as f64;
    start.clamp(0.0, (extent - window) as f64)
}

/// A pair of equally sized patches at two emulated magnifications.
#[derive(Debug, Clone, PartialEq)]
pub struct Glimpse {
    /// Full-resolution `w`×`w` crop, channel-major.
    pub fine: Array3<f64>,
    /// `2w`×`2w` crop average-pooled 2×, channel-major.
    pub coarse: Array3<f64>,
    pub center: Location,
}

pub fn extract_glimpse(tile: &Tile, center: Location, w: usize) -> Result<Glimpse> {
    if w == 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("glimpse side {w} must be positive and even")));
    }
    if w > tile.height.min(tile.width) / 2 {
        return Err(Error::invalid(format!(
            "glimpse side {w} exceeds half the tile extent ({}x{})",
            tile.height, tile.width
        )));
    }

    let fx = window_origin(center.x, tile.width, w);
    let fy = window_origin(center.y, tile.height, w);
    let fine = Array3::from_shape_fn((CHANNELS, w, w), |(c, y, x)| tile.pixel(fy + y, fx + x, c));

    let cx = window_origin(center.x, tile.width, 2 * w);
    let cy = window_origin(center.y, tile.height, 2 * w);
    let coarse = Array3::from_shape_fn((CHANNELS, w, w), |(c, y, x)| {
        let (sy, sx) = (cy + 2 * y, cx + 2 * x);
        0.25 * (tile.pixel(sy, sx, c)
            + tile.pixel(sy, sx + 1, c)
            + tile.pixel(sy + 1, sx, c)
            + tile.pixel(sy + 1, sx + 1, c))
    });

    Ok(Glimpse { fine, coarse, center })
}

/// The tile downsampled 16× per axis, with previously attended regions blanked.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextImage {
    pub pixels: Array3<f64>,
    pub suppressed: Vec<Location>,
    tile_height: usize,
    tile_width: usize,
}

impl ContextImage {
    pub fn tile_dims(&self) -> (usize, usize) {
        (self.tile_height, self.tile_width)
    }

    pub fn zero_count(&self) -> usize {
        let (_, h, w) = self.pixels.dim();
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| (0..CHANNELS).all(|c| self.pixels[[c, y, x]] == 0.0))
            .count()
    }
}

pub fn make_context(tile: &Tile) -> Result<ContextImage> {
    let (h, w) = (tile.height, tile.width);
    if h % CONTEXT_FACTOR != 0 || w % CONTEXT_FACTOR != 0 {
        return Err(Error::shape(format!("tile {h}x{w} not divisible by {CONTEXT_FACTOR}")));
    }
    let (ch, cw) = (h / CONTEXT_FACTOR, w / CONTEXT_FACTOR);
    let norm = 1.0 / (CONTEXT_FACTOR * CONTEXT_FACTOR) as f64;
    let mut pixels = Array3::<f64>::zeros((CHANNELS, ch, cw));
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                pixels[[c, y / CONTEXT_FACTOR, x / CONTEXT_FACTOR]] += tile.pixel(y, x, c);
            }
        }
    }
    pixels.mapv_inplace(|v| v * norm);
    Ok(ContextImage { pixels, suppressed: Vec::new(), tile_height: h, tile_width: w })
}

/// Context-pixel window `(y0, x0, side)` covered by the fine footprint of a
/// `w`-pixel glimpse at `center`.
pub fn context_window(ctx: &ContextImage, center: Location, w: usize) -> (usize, usize, usize) {
    let (th, tw) = (ctx.tile_height, ctx.tile_width);
    let w = w.min(th).min(tw);
    let x0 = window_origin(center.x, tw, w) / CONTEXT_FACTOR;
    let y0 = window_origin(center.y, th, w) / CONTEXT_FACTOR;
    let side = (w / CONTEXT_FACTOR).max(1);
    (y0, x0, side)
}

/// Blanks the context pixels under the fine footprint of a glimpse at `center`.
pub fn suppress_region(mut ctx: ContextImage, center: Location, w: usize) -> ContextImage {
    suppress_in_place(&mut ctx, center, w);
    ctx
}

pub fn suppress_in_place(ctx: &mut ContextImage, center: Location, w: usize) {
    let (y0, x0, side) = context_window(ctx, center, w);
    let (_, ch, cw) = ctx.pixels.dim();
    for c in 0..CHANNELS {
        for y in y0..(y0 + side).min(ch) {
            for x in x0..(x0 + side).min(cw) {
                ctx.pixels[[c, y, x]] = 0.0;
            }
        }
    }
    if !ctx.suppressed.contains(&center) {
        ctx.suppressed.push(center);
    }
}
