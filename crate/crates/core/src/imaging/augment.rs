use serde::{Deserialize, Serialize};

use super::{Tile, CHANNELS};
use crate::error::{Error, Result};

/// Dihedral transforms applied during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    Rot0,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
}

impl Augment {
    pub const ALL: [Augment; 7] = [
        Augment::Rot0,
        Augment::Rot90,
        Augment::Rot180,
        Augment::Rot270,
        Augment::FlipH,
        Augment::FlipV,
        Augment::Transpose,
    ];

    pub fn inverse(self) -> Augment {
        match self {
            Augment::Rot90 => Augment::Rot270,
            Augment::Rot270 => Augment::Rot90,
            other => other,
        }
    }

    pub fn requires_square(self) -> bool {
        matches!(self, Augment::Rot90 | Augment::Rot270 | Augment::Transpose)
    }

    /// Source coordinate `(y, x)` read for output position `(y, x)`.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Augment::Rot0 => (y, x),
            // clockwise quarter turn
            Augment::Rot90 => (h - 1 - x, y),
            Augment::Rot180 => (h - 1 - y, w - 1 - x),
            Augment::Rot270 => (x, w - 1 - y),
            Augment::FlipH => (y, w - 1 - x),
            Augment::FlipV => (h - 1 - y, x),
            Augment::Transpose => (x, y),
        }
    }
}

/// Applies `op` identically to pixels, stain and relevance; the label and seed
/// are carried over unchanged.
pub fn augment(tile: &Tile, op: Augment) -> Result<Tile> {
    if op.requires_square() && !tile.is_square() {
        return Err(Error::invalid(format!(
            "{op:?} needs a square tile, got {}x{}",
            tile.height, tile.width
        )));
    }
    let (h, w) = (tile.height, tile.width);
    let n = h * w;
    let mut pixels = Vec::with_capacity(n * CHANNELS);
    let mut stain = Vec::with_capacity(n);
    let mut relevance = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = op.source(y, x, h, w);
            let s = sy * w + sx;
            pixels.extend_from_slice(&tile.pixels[s * CHANNELS..(s + 1) * CHANNELS]);
            stain.push(tile.stain[s]);
            relevance.push(tile.relevance[s]);
        }
    }
    Ok(Tile { height: h, width: w, pixels, stain, relevance, label: tile.label, seed: tile.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Tile {
        let mut t = Tile::from_fn(h, w, 2, 9, |y, x, c| ((y * w + x) * 3 + c) as f64 / (h * w * 3) as f64).unwrap();
        t.stain = (0..h * w).map(|i| (i * 7 % 65536) as u16).collect();
        t.relevance = (0..h * w).map(|i| i % 5 == 0).collect();
        t
    }

    #[test]
    fn rot0_is_identity() {
        let t = ramp(16, 16);
        assert_eq!(augment(&t, Augment::Rot0).unwrap(), t);
    }

    #[test]
    fn flip_twice_is_identity() {
        let t = ramp(16, 32);
        let once = augment(&t, Augment::FlipH).unwrap();
        assert_ne!(once, t);
        assert_eq!(augment(&once, Augment::FlipH).unwrap(), t);
    }

    #[test]
    fn four_quarter_turns_is_identity() {
        let t = ramp(32, 32);
        let mut cur = t.clone();
        for _ in 0..4 {
            cur = augment(&cur, Augment::Rot90).unwrap();
        }
        assert_eq!(cur, t);
        let two = augment(&augment(&t, Augment::Rot90).unwrap(), Augment::Rot90).unwrap();
        assert_eq!(two, augment(&t, Augment::Rot180).unwrap());
    }

    #[test]
    fn quarter_turn_moves_top_left_to_top_right() {
        let t = ramp(16, 16);
        let r = augment(&t, Augment::Rot90).unwrap();
        // clockwise: the old bottom-left corner becomes the new top-left
        assert_eq!(r.pixel(0, 0, 0), t.pixel(15, 0, 0));
        assert_eq!(r.pixel(0, 15, 0), t.pixel(0, 0, 0));
    }

    #[test]
    fn square_only_ops_reject_rectangles() {
        let t = ramp(16, 32);
        for op in [Augment::Rot90, Augment::Rot270, Augment::Transpose] {
            assert!(augment(&t, op).is_err());
        }
        for op in [Augment::Rot0, Augment::Rot180, Augment::FlipH, Augment::FlipV] {
            assert!(augment(&t, op).is_ok());
        }
    }

    proptest! {
        #[test]
        fn op_then_inverse_is_identity(idx in 0usize..7, seed in 0u64..1000) {
            let op = Augment::ALL[idx];
            let mut t = ramp(16, 16);
            t.stain.rotate_left((seed % 256) as usize);
            let back = augment(&augment(&t, op).unwrap(), op.inverse()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
