//! Inhibition-of-return penalty: mean pairwise overlap of glimpse footprints.

use crate::imaging::{window_origin_continuous, Location};

/// Square footprint geometry shared by the penalty and its gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub tile_height: usize,
    pub tile_width: usize,
    pub window: usize,
}

impl Footprint {
    fn origin(&self, loc: Location) -> (f64, f64) {
        (
            window_origin_continuous(loc.x, self.tile_width, self.window),
            window_origin_continuous(loc.y, self.tile_height, self.window),
        )
    }

    /// `d origin / d coordinate` along x and y; zero where the window is pinned to an edge.
    fn origin_slope(&self, loc: Location) -> (f64, f64) {
        let slope = |c: f64, extent: usize| {
            let raw = c * (extent - 1) as f64 - (self.window / 2) as f64;
            if raw > 0.0 && raw < (extent - self.window) as f64 {
                (extent - 1) as f64
            } else {
                0.0
            }
        };
        (slope(loc.x, self.tile_width), slope(loc.y, self.tile_height))
    }
}

fn pair_count(t: usize) -> f64 {
    (t * t.saturating_sub(1) / 2) as f64
}

/// `(1 / C(T,2)) · Σ_{i<j} |F_i ∩ F_j| / w²`; zero for fewer than two glimpses.
pub fn ior_penalty(locs: &[Location], fp: Footprint) -> f64 {
    ior_penalty_grad(locs, fp).0
}

/// Penalty and its gradient with respect to each location's `(x, y)`.
/// At coincident origins the subgradient zero is used.
pub fn ior_penalty_grad(locs: &[Location], fp: Footprint) -> (f64, Vec<[f64; 2]>) {
    let t = locs.len();
    let mut grad = vec![[0.0; 2]; t];
    if t < 2 {
        return (0.0, grad);
    }
    let w = fp.window as f64;
    let norm = 1.0 / (pair_count(t) * w * w);
    let origins: Vec<_> = locs.iter().map(|&l| fp.origin(l)).collect();
    let slopes: Vec<_> = locs.iter().map(|&l| fp.origin_slope(l)).collect();
    let mut total = 0.0;
    for i in 0..t {
        for j in i + 1..t {
            let (dx, dy) = (origins[i].0 - origins[j].0, origins[i].1 - origins[j].1);
            let ox = (w - dx.abs()).max(0.0);
            let oy = (w - dy.abs()).max(0.0);
            total += ox * oy;
            if ox > 0.0 && oy > 0.0 {
                // d ox / d origin_i = -sign(dx)
                let gx = -dx.signum() * f64::from(dx != 0.0) * oy * norm;
                let gy = -dy.signum() * f64::from(dy != 0.0) * ox * norm;
                grad[i][0] += gx * slopes[i].0;
                grad[j][0] -= gx * slopes[j].0;
                grad[i][1] += gy * slopes[i].1;
                grad[j][1] -= gy * slopes[j].1;
            }
        }
    }
    (total * norm, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FP: Footprint = Footprint { tile_height: 256, tile_width: 256, window: 16 };

    #[test]
    fn coincident_pair_is_one_and_disjoint_is_zero() {
        let l = Location::new(0.3, 0.7);
        assert_eq!(ior_penalty(&[l, l], FP), 1.0);
        let far = [Location::new(0.1, 0.1), Location::new(0.5, 0.5), Location::new(0.9, 0.9)];
        assert_eq!(ior_penalty(&far, FP), 0.0);
        assert_eq!(ior_penalty(&[l], FP), 0.0);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let locs = [Location::new(0.40, 0.41), Location::new(0.43, 0.45), Location::new(0.38, 0.44)];
        let (_, g) = ior_penalty_grad(&locs, FP);
        let h = 1e-7;
        for i in 0..3 {
            for axis in 0..2 {
                let bump = |d: f64| {
                    let mut l = locs;
                    if axis == 0 { l[i].x += d } else { l[i].y += d }
                    ior_penalty(&l, FP)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - g[i][axis]).abs() < 1e-6 * (1.0 + fd.abs()), "{i} {axis}: {fd} vs {}", g[i][axis]);
            }
        }
    }

    #[test]
    fn pinned_windows_have_zero_gradient() {
        let locs = [Location::new(0.0, 0.0), Location::new(0.01, 0.0)];
        let (p, g) = ior_penalty_grad(&locs, FP);
        assert!(p > 0.0);
        assert_eq!(g, vec![[0.0; 2]; 2]);
    }
}
