//! Slide-level scoring from tile predictions.
//!
//! The contest metric defaults (point matrix, bonus, tolerance, confidence
//! weighting) are placeholders chosen for this crate, not reference values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthenv::NUM_CLASSES;

pub const MAX_POINTS: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileScore {
    pub id: String,
    pub score: u8,
    /// Largest entry of the final class distribution.
    pub confidence: f64,
    /// Tissue area of the tile, in any consistent unit.
    pub tissue_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub tiles: Vec<TileScore>,
    pub slide_score: u8,
    /// Share of tissue area predicted as the top score.
    pub pcms: f64,
    pub area_ratios: [f64; NUM_CLASSES],
}

fn check_score(s: u8) -> Result<()> {
    if usize::from(s) >= NUM_CLASSES {
        return Err(Error::invalid(format!("score {s} outside 0..{NUM_CLASSES}")));
    }
    Ok(())
}

/// Most frequent score; ties go to the lower score.
pub fn dominant_class(scores: &[u8]) -> Result<u8> {
    if scores.is_empty() {
        return Err(Error::invalid("dominant class of an empty tile list"));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for &s in scores {
        check_score(s)?;
        counts[s as usize] += 1;
    }
    let mut best = 0;
    for s in 1..NUM_CLASSES {
        if counts[s] > counts[best] {
            best = s;
        }
    }
    Ok(best as u8)
}

/// Per-score share of total tissue area, from `(score, tissue area)` pairs.
pub fn pcms(tiles: &[(u8, f64)]) -> Result<[f64; NUM_CLASSES]> {
    let mut area = [0.0; NUM_CLASSES];
    for &(s, a) in tiles {
        check_score(s)?;
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::invalid(format!("tissue area {a} must be finite and nonnegative")));
        }
        area[s as usize] += a;
    }
    let total: f64 = area.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("slide has no tissue area"));
    }
    Ok(area.map(|a| a / total))
}

pub fn predict_slide(tiles: Vec<TileScore>) -> Result<SlidePrediction> {
    let scores: Vec<u8> = tiles.iter().map(|t| t.score).collect();
    let slide_score = dominant_class(&scores)?;
    let pairs: Vec<(u8, f64)> = tiles.iter().map(|t| (t.score, t.tissue_area)).collect();
    let area_ratios = pcms(&pairs)?;
    Ok(SlidePrediction { tiles, slide_score, pcms: area_ratios[NUM_CLASSES - 1], area_ratios })
}

/// `points[gt][pred]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix(pub [[f64; NUM_CLASSES]; NUM_CLASSES]);

impl Default for PenaltyMatrix {
    /// 15 on the diagonal, then 10, 5, 0 as the scores drift apart.
    fn default() -> Self {
        let by_distance = [15.0, 10.0, 5.0, 0.0];
        PenaltyMatrix(std::array::from_fn(|g| std::array::from_fn(|p| by_distance[g.abs_diff(p)])))
    }
}

impl PenaltyMatrix {
    pub fn validate(&self) -> Result<()> {
        for (g, row) in self.0.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                if !(0.0..=MAX_POINTS).contains(&v) {
                    return Err(Error::Config(format!("penalty matrix entry [{g}][{p}] = {v} outside [0, 15]")));
                }
            }
        }
        Ok(())
    }

    /// Builds a matrix from rows, rejecting anything that is not 4×4.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != NUM_CLASSES || rows.iter().any(|r| r.len() != NUM_CLASSES) {
            return Err(Error::Config(format!("penalty matrix must be {NUM_CLASSES}x{NUM_CLASSES}")));
        }
        let m = PenaltyMatrix(std::array::from_fn(|g| std::array::from_fn(|p| rows[g][p])));
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContestConfig {
    pub matrix: PenaltyMatrix,
    /// Credit added when the PCMS estimate is within `tolerance`.
    pub bonus: f64,
    pub tolerance: f64,
}

impl Default for ContestConfig {
    fn default() -> Self {
        ContestConfig { matrix: PenaltyMatrix::default(), bonus: 1.0, tolerance: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContestScore {
    pub points: f64,
    pub bonus: f64,
    pub weighted_confidence: f64,
    pub combined: f64,
}

/// Mean over tiles of `confidence` when the tile agrees with `slide_score`,
/// else `1 − confidence`.
pub fn weighted_confidence(slide_score: u8, tiles: &[(u8, f64)]) -> Result<f64> {
    if tiles.is_empty() {
        return Err(Error::invalid("weighted confidence of an empty tile list"));
    }
    let mut sum = 0.0;
    for &(s, c) in tiles {
        check_score(s)?;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
        }
        sum += if s == slide_score { c } else { 1.0 - c };
    }
    Ok(sum / tiles.len() as f64)
}

/// Contest-style score of one slide; `tiles` holds `(score, confidence)`.
pub fn contest_score(
    predicted: u8,
    truth: u8,
    pcms_predicted: f64,
    pcms_truth: f64,
    tiles: &[(u8, f64)],
    cfg: &ContestConfig,
) -> Result<ContestScore> {
    check_score(predicted)?;
    check_score(truth)?;
    cfg.matrix.validate()?;
    let points = cfg.matrix.0[truth as usize][predicted as usize];
    let bonus = if (pcms_predicted - pcms_truth).abs() <= cfg.tolerance { cfg.bonus } else { 0.0 };
    let weighted_confidence = weighted_confidence(predicted, tiles)?;
    Ok(ContestScore { points, bonus, weighted_confidence, combined: (points + bonus) * weighted_confidence })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matrix_by_distance() {
        let m = PenaltyMatrix::default();
        assert_eq!(m.0[0], [15.0, 10.0, 5.0, 0.0]);
        assert_eq!(m.0[2], [5.0, 10.0, 15.0, 10.0]);
        m.validate().unwrap();
    }

    #[test]
    fn bad_matrices_rejected() {
        let mut m = PenaltyMatrix::default();
        m.0[1][1] = 16.0;
        assert!(m.validate().is_err());
        assert!(PenaltyMatrix::from_rows(&vec![vec![0.0; 4]; 3]).is_err());
        assert!(PenaltyMatrix::from_rows(&[vec![15.0, -1.0, 0.0, 0.0], vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]]).is_err());
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(dominant_class(&[]).is_err());
        assert!(pcms(&[(1, 0.0)]).is_err());
        assert!(dominant_class(&[4]).is_err());
    }

    #[test]
    fn slide_prediction_fields() {
        let tiles = (0..5u8)
            .map(|i| TileScore { id: i.to_string(), score: if i < 3 { 3 } else { 1 }, confidence: 0.9, tissue_area: 1.0 })
            .collect();
        let s = predict_slide(tiles).unwrap();
        assert_eq!(s.slide_score, 3);
        assert_eq!(s.area_ratios, [0.0, 0.4, 0.0, 0.6]);
        assert_eq!(s.pcms, 0.6);
    }
}
