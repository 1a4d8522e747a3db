//! The combined objective `L = L_θ + λ (L_sc + L_IoR)` and its gradient.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::ior::{ior_penalty_grad, Footprint};
use super::{BaselineEstimator, Episode, LossMode, PolicyConfig};
use crate::error::{Error, Result};
use crate::nn::heads::softmax_backward;
use crate::nn::{Network, ParameterSet};

/// Batch means of the loss terms. `total` is always assembled as
/// `theta + lambda * (sc + ior)` from the other fields.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub theta: f64,
    pub sc: f64,
    pub ior: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn combine(theta: f64, sc: f64, ior: f64, lambda: f64) -> Self {
        LossBreakdown { total: theta + lambda * (sc + ior), theta, sc, ior, lambda }
    }
}

/// Log-density of `a` under `N(mean, σ² I)` in two dimensions.
pub fn gaussian_log_density(a: [f64; 2], mean: [f64; 2], sigma: f64) -> f64 {
    let q = ((a[0] - mean[0]).powi(2) + (a[1] - mean[1]).powi(2)) / (sigma * sigma);
    -0.5 * q - (2.0 * std::f64::consts::PI * sigma * sigma).ln()
}

/// `∇_mean log N(a; mean, σ² I) = (a - mean) / σ²`.
pub fn gaussian_score(a: [f64; 2], mean: [f64; 2], sigma: f64) -> [f64; 2] {
    [0, 1].map(|i| (a[i] - mean[i]) / (sigma * sigma))
}

/// Expected-score regularizer `|Σ_s s·p_s − g|` and its gradient on `p`
/// (subgradient zero at the kink).
pub fn task_reg_expected(probs: &Array1<f64>, label: u8) -> (f64, Array1<f64>) {
    let expected: f64 = probs.iter().enumerate().map(|(s, &p)| s as f64 * p).sum();
    let diff = expected - f64::from(label);
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    (diff.abs(), Array1::from_iter((0..probs.len()).map(|s| sign * s as f64)))
}

/// Hard-decision regularizer `|ŷ − g|`; piecewise constant, so no gradient.
pub fn task_reg_strict(prediction: u8, label: u8) -> f64 {
    (f64::from(prediction) - f64::from(label)).abs()
}

fn one_hot(n: usize, k: u8) -> Array1<f64> {
    Array1::from_iter((0..n).map(|i| f64::from(i == k as usize)))
}

/// Batch-mean loss terms, and (when `grads` is given) their gradient
/// accumulated into `grads`. Actions, noise and advantages are those recorded
/// in the episodes and baselines, i.e. they are treated as constants.
pub fn loss_and_grad(
    net: &Network,
    p: &ParameterSet,
    episodes: &[Episode],
    cfg: &PolicyConfig,
    baseline: &BaselineEstimator,
    mut grads: Option<&mut ParameterSet>,
) -> Result<LossBreakdown> {
    let fp = Footprint {
        tile_height: net.config().tile_size,
        tile_width: net.config().tile_size,
        window: net.config().glimpse_size,
    };
    let classes = net.config().classes;
    let lambda = cfg.lambda;
    let (mut theta, mut sc, mut ior) = (0.0, 0.0, 0.0);
    let inv_n = 1.0 / episodes.len().max(1) as f64;

    for (e_idx, ep) in episodes.iter().enumerate() {
        let t_max = ep.steps();
        if t_max != cfg.steps || ep.tape.len() != t_max {
            return Err(Error::invalid(format!("episode {e_idx} has {t_max} steps, expected {}", cfg.steps)));
        }
        let returns = ep.returns(cfg.gamma);
        let mut dlogits: Vec<Array1<f64>> = vec![Array1::zeros(classes); t_max];
        let mut dmean = vec![[0.0; 2]; t_max];

        for (t, d) in ep.decisions.iter().enumerate() {
            let adv = returns[t + 1] - baseline.location[t];
            theta -= adv * gaussian_log_density(d.raw, d.mean, cfg.sigma);
            let score = gaussian_score(d.raw, d.mean, cfg.sigma);
            dmean[t] = [-adv * score[0], -adv * score[1]];
        }

        for t in 0..t_max {
            let probs = &ep.probs[t];
            match cfg.mode {
                LossMode::Hybrid => {
                    theta -= probs[ep.label as usize].ln();
                    dlogits[t] = probs - &one_hot(classes, ep.label);
                }
                LossMode::Strict => {
                    let adv = returns[t] - baseline.class[t];
                    let k = ep.predictions[t];
                    theta -= adv * probs[k as usize].ln();
                    dlogits[t] = (&one_hot(classes, k) - probs) * (-adv);
                }
            }
        }

        if cfg.task_reg {
            let last = t_max - 1;
            match cfg.mode {
                LossMode::Hybrid => {
                    let (v, dprobs) = task_reg_expected(&ep.probs[last], ep.label);
                    sc += v;
                    let dl = softmax_backward(ep.probs[last].view(), dprobs.view());
                    dlogits[last].scaled_add(lambda, &dl);
                }
                LossMode::Strict => sc += task_reg_strict(ep.predictions[last], ep.label),
            }
        }

        if cfg.ior {
            let (pen, g) = ior_penalty_grad(&ep.penalty_locations(cfg.sigma), fp);
            ior += pen;
            for (t, d) in ep.decisions.iter().enumerate() {
                let inside = d.interior(cfg.sigma);
                for i in 0..2 {
                    if inside[i] {
                        dmean[t][i] += lambda * g[t + 1][i];
                    }
                }
            }
        }

        if let Some(grads) = grads.as_deref_mut() {
            let mut dstate = net.zero_state();
            for t in (0..t_max).rev() {
                dlogits[t] *= inv_n;
                let dm = [dmean[t][0] * inv_n, dmean[t][1] * inv_n];
                dstate = net.step_backward_with(p, &ep.tape[t], &dlogits[t], dm, dstate, grads, cfg.detach_location);
            }
        }
    }

    let out = LossBreakdown::combine(theta * inv_n, sc * inv_n, ior * inv_n, lambda);
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss terms theta={} sc={} ior={}",
            out.theta, out.sc, out.ior
        )));
    }
    if let Some(g) = grads {
        g.check_finite()?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn log_density_normalizes() {
        // integrate over a grid around the mean
        let (s, h) = (0.1, 0.005);
        let mut total = 0.0;
        for i in -200..=200 {
            for j in -200..=200 {
                total += gaussian_log_density([i as f64 * h, j as f64 * h], [0.0, 0.0], s).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn expected_task_reg_values() {
        let p = array![0.1, 0.2, 0.3, 0.4];
        let (v, g) = task_reg_expected(&p, 0);
        assert!((v - 2.0).abs() < 1e-12);
        assert_eq!(g, array![0.0, 1.0, 2.0, 3.0]);
        let (v, g) = task_reg_expected(&array![0.0, 0.0, 1.0, 0.0], 2);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        assert_eq!(task_reg_strict(3, 1), 2.0);
    }

    #[test]
    fn combine_is_exact_formula() {
        let b = LossBreakdown::combine(1.25, 0.5, 0.125, 0.04);
        assert_eq!(b.total, 1.25 + 0.04 * (0.5 + 0.125));
    }
}
