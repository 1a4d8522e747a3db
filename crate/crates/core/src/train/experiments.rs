use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{train, Ablation, EpochSummary, ExperimentConfig, StepLog, TrainOutcome, TrainReport};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::imaging::raster::write_atomic;
use crate::nn::checkpoint;

/// Files written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub report: TrainReport,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub report_path: PathBuf,
    pub log_path: PathBuf,
    pub config_path: PathBuf,
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Data(e.to_string()))
}

pub fn log_csv(log: &[StepLog]) -> String {
    let mut s = String::from("epoch,step,lr,loss,loss_theta,loss_sc,loss_ior,lambda,batch_accuracy\n");
    for r in log {
        let l = &r.loss;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.lr, l.total, l.theta, l.sc, l.ior, l.lambda, r.batch_accuracy
        )
        .unwrap();
    }
    s
}

/// Trains on `data` and writes checkpoints, the report, the per-step log and
/// the resolved config under `out`. Output bytes depend only on the inputs.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out: &Path,
    on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainArtifacts> {
    let TrainOutcome { net, best, last, report, log } = train(cfg, &data.train, &data.val, on_epoch)?;
    std::fs::create_dir_all(out)?;
    let best_checkpoint = out.join("best.ckpt");
    let last_checkpoint = out.join("last.ckpt");
    let seed = cfg.train.seed;
    checkpoint::save(&best_checkpoint, &net, &best, report.best_epoch, report.steps, seed)?;
    checkpoint::save(&last_checkpoint, &net, &last, report.epochs.len().saturating_sub(1), report.steps, seed)?;
    let report_path = out.join("report.toml");
    write_atomic(&report_path, to_toml(&report)?.as_bytes())?;
    let log_path = out.join("train_log.csv");
    write_atomic(&log_path, log_csv(&log).as_bytes())?;
    let config_path = out.join("config.toml");
    write_atomic(&config_path, cfg.to_toml().as_bytes())?;
    Ok(TrainArtifacts { report, best_checkpoint, last_checkpoint, report_path, log_path, config_path })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    /// Validation accuracy of the selected parameters, per seed.
    pub accuracies: Vec<f64>,
    pub hit_rates: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_hit_rate: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Trains every ablation with every seed on the same data.
pub fn run_ablations(
    base: &ExperimentConfig,
    ablations: &[Ablation],
    seeds: &[u64],
    data: &Dataset,
    mut progress: impl FnMut(Ablation, u64, &TrainReport),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &ablation in ablations {
        let (mut accs, mut hits) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.ablation = ablation;
            cfg.train.seed = seed;
            let outcome = train(&cfg, &data.train, &data.val, |_| {})?;
            let best = &outcome.report.epochs[outcome.report.best_epoch].val;
            accs.push(best.accuracy);
            hits.push(best.hit_rate);
            progress(ablation, seed, &outcome.report);
        }
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        let mean_hit_rate = mean_std(&hits).0;
        rows.push(AblationRow {
            ablation,
            seeds: seeds.to_vec(),
            accuracies: accs,
            hit_rates: hits,
            mean_accuracy,
            std_accuracy,
            mean_hit_rate,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Glimpses per episode.
    Steps,
    /// Glimpse side in pixels.
    RoiSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub accuracy: f64,
    pub hit_rate: f64,
    pub mean_ior: f64,
    pub best_epoch: usize,
}

/// Retrains `base` once per value of `axis`.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
    data: &Dataset,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &value in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::Steps => cfg.policy.steps = value,
            SweepAxis::RoiSize => cfg.net.glimpse_size = value,
        }
        let outcome = train(&cfg, &data.train, &data.val, |_| {})?;
        let best = &outcome.report.epochs[outcome.report.best_epoch].val;
        let row = SweepRow {
            axis,
            value,
            accuracy: best.accuracy,
            hit_rate: best.hit_rate,
            mean_ior: best.mean_ior,
            best_epoch: outcome.report.best_epoch,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Markdown table with a header row.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    writeln!(s, "| {} |", headers.join(" | ")).unwrap();
    writeln!(s, "|{}|", headers.iter().map(|_| "---").collect::<Vec<_>>().join("|")).unwrap();
    for r in rows {
        writeln!(s, "| {} |", r.join(" | ")).unwrap();
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.ablation.name().to_string(),
                format!("{:.4}", r.mean_accuracy),
                format!("{:.4}", r.std_accuracy),
                format!("{:.4}", r.mean_hit_rate),
                r.accuracies.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" "),
            ]
        })
        .collect();
    render_table(&["ablation", "mean_acc", "std_acc", "mean_hit_rate", "per_seed_acc"], &body)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let name = |a: SweepAxis| match a {
        SweepAxis::Steps => "T",
        SweepAxis::RoiSize => "roi",
    };
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                name(r.axis).to_string(),
                r.value.to_string(),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.hit_rate),
                format!("{:.4}", r.mean_ior),
                r.best_epoch.to_string(),
            ]
        })
        .collect();
    render_table(&["axis", "value", "accuracy", "hit_rate", "mean_ior", "best_epoch"], &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        let t = render_table(&["a", "b"], &[vec!["1".into(), "2".into()]]);
        assert_eq!(t, "| a | b |\n|---|---|\n| 1 | 2 |\n");
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
