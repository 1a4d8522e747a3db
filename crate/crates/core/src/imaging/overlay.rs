//! Attention traces drawn over a tile: one numbered box per glimpse, the first
//! blue, the last red, hues in between interpolated.

use super::{window_origin, Location, Tile, CHANNELS};
use crate::error::{Error, Result};

/// 3×5 bitmaps for the digits 0–9, one row per `u8`, high bit on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// Colour of box `i` of `n`, as RGB in `[0, 1]`.
pub fn box_color(i: usize, n: usize) -> [f64; 3] {
    let t = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    [t, 0.0, 1.0 - t]
}

struct Canvas<'a> {
    width: usize,
    height: usize,
    samples: &'a mut [u16],
}

impl Canvas<'_> {
    fn put(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        if y < self.height && x < self.width {
            let base = (y * self.width + x) * CHANNELS;
            for c in 0..CHANNELS {
                self.samples[base + c] = super::quantize(rgb[c]);
            }
        }
    }

    fn outline(&mut self, y0: usize, x0: usize, side: usize, rgb: [f64; 3]) {
        let (y1, x1) = (y0 + side - 1, x0 + side - 1);
        for k in 0..side {
            self.put(y0, x0 + k, rgb);
            self.put(y1, x0 + k, rgb);
            self.put(y0 + k, x0, rgb);
            self.put(y0 + k, x1, rgb);
        }
    }

    fn number(&mut self, y0: usize, x0: usize, n: usize, rgb: [f64; 3]) {
        let text = n.to_string();
        for (k, ch) in text.bytes().enumerate() {
            let glyph = DIGITS[(ch - b'0') as usize];
            for (r, bits) in glyph.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        self.put(y0 + r, x0 + 4 * k + col, rgb);
                    }
                }
            }
        }
    }
}

/// RGB samples of `tile` with the trace drawn on top. Box `i` outlines the
/// `window`-pixel fine footprint of glimpse `i` and is labelled `i + 1`.
pub fn render_trace(tile: &Tile, trace: &[Location], window: usize) -> Result<Vec<u16>> {
    let (h, w) = (tile.height(), tile.width());
    if window == 0 || window > h.min(w) {
        return Err(Error::invalid(format!("box side {window} does not fit a {h}x{w} tile")));
    }
    if let Some(l) = trace.iter().find(|l| !(0.0..=1.0).contains(&l.x) || !(0.0..=1.0).contains(&l.y)) {
        return Err(Error::invalid(format!("trace location ({}, {}) outside [0, 1]²", l.x, l.y)));
    }
    let mut samples = tile.raw_pixels().to_vec();
    let mut canvas = Canvas { width: w, height: h, samples: &mut samples };
    for (i, loc) in trace.iter().enumerate() {
        let rgb = box_color(i, trace.len());
        let x0 = window_origin(loc.x, w, window);
        let y0 = window_origin(loc.y, h, window);
        canvas.outline(y0, x0, window, rgb);
        canvas.number(y0 + 2, x0 + 2, i + 1, rgb);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthenv::{gen_tile, EnvConfig};

    fn tile() -> Tile {
        gen_tile(&EnvConfig { tile_size: 64, ..EnvConfig::default() }, 2, 4).unwrap()
    }

    #[test]
    fn empty_trace_is_identity() {
        let t = tile();
        assert_eq!(render_trace(&t, &[], 8).unwrap(), t.raw_pixels());
    }

    #[test]
    fn first_blue_last_red() {
        assert_eq!(box_color(0, 6), [0.0, 0.0, 1.0]);
        assert_eq!(box_color(5, 6), [1.0, 0.0, 0.0]);
        let t = tile();
        let out = render_trace(&t, &[Location::new(0.0, 0.0), Location::new(1.0, 1.0)], 8).unwrap();
        // top-left corner pixel belongs to box 1, bottom-right to box 2
        assert_eq!(&out[..3], &[0, 0, u16::MAX]);
        let last = out.len() - 3;
        assert_eq!(&out[last..], &[u16::MAX, 0, 0]);
    }

    #[test]
    fn rejects_out_of_range_trace() {
        let bad = Location { x: 1.5, y: 0.0 };
        assert!(render_trace(&tile(), &[bad], 8).is_err());
    }
}
