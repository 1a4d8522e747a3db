use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use roiscope_core::aggregate::{contest_score, pcms, predict_slide, ContestConfig, ContestScore, SlidePrediction, TileScore};
use roiscope_core::dataset::{generate, load_dataset, load_slide, write_dataset, write_slide, Dataset, MANIFEST, SLIDE_RECORD};
use roiscope_core::imaging::overlay::render_trace;
use roiscope_core::imaging::raster::{encode_pixmap, read_tile, write_atomic};
use roiscope_core::imaging::Location;
use roiscope_core::nn::checkpoint::{self, manifest_path};
use roiscope_core::policy::LossMode;
use roiscope_core::rng::derive_seed;
use roiscope_core::synthenv::{gen_slide, tissue_fraction, NUM_CLASSES};
use roiscope_core::train::{
    ablation_table, cmd_train, eval_episode, evaluate, run_ablations, sweep, sweep_table, Ablation, AblationRow,
    EvalReport, ExperimentConfig, SweepAxis, SweepRow,
};
use roiscope_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::manifest::Recorder;
use crate::{Overrides, Usage};

const RUN_MANIFEST: &str = "run_manifest.toml";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn apply(o: &Overrides, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(a) = &o.ablation {
        cfg.ablation = Ablation::parse(a)?;
    }
    if let Some(t) = o.steps {
        cfg.policy.steps = t;
    }
    if let Some(w) = o.roi_size {
        cfg.net.glimpse_size = w;
    }
    if let Some(l) = o.lambda {
        cfg.policy.lambda = l;
    }
    if let Some(m) = &o.mode {
        cfg.policy.mode = match m.as_str() {
            "hybrid" => LossMode::Hybrid,
            "strict" => LossMode::Strict,
            other => return Err(usage(format!("unknown mode `{other}` (expected hybrid or strict)"))),
        };
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_config(o: &Overrides, rec: &mut Recorder) -> Result<ExperimentConfig> {
    let cfg = match &o.config {
        Some(path) => {
            rec.input(path).map_err(|e| usage(format!("{e:#}")))?;
            ExperimentConfig::load(path)?
        }
        None => ExperimentConfig::default(),
    };
    apply(o, cfg)
}

/// Config for a checkpoint: `--config`, else the `config.toml` written next to
/// it by `train`, else defaults.
fn checkpoint_config(o: &Overrides, ckpt: &Path, rec: &mut Recorder) -> Result<ExperimentConfig> {
    if o.config.is_some() {
        return load_config(o, rec);
    }
    let sibling = ckpt.parent().unwrap_or(Path::new(".")).join("config.toml");
    if sibling.is_file() {
        rec.input(&sibling)?;
        return apply(o, ExperimentConfig::load(&sibling)?);
    }
    apply(o, ExperimentConfig::default())
}

fn load_or_generate(cfg: &ExperimentConfig, data: Option<&Path>, rec: &mut Recorder) -> Result<Dataset> {
    match data {
        Some(dir) => {
            rec.input(&dir.join(MANIFEST))?;
            let (ds, manifest) = load_dataset(dir)?;
            if manifest.env.tile_size != cfg.net.tile_size {
                return Err(CoreError::Data(format!(
                    "dataset tiles are {0}x{0}, the network expects {1}x{1}",
                    manifest.env.tile_size, cfg.net.tile_size
                ))
                .into());
            }
            Ok(ds)
        }
        None => Ok(generate(&cfg.env, &cfg.data)?),
    }
}

fn write_toml<T: Serialize>(path: &Path, value: &T, rec: &mut Recorder) -> Result<()> {
    write_atomic(path, toml::to_string(value)?.as_bytes())?;
    rec.output(path);
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| usage(format!("bad {what} value `{v}`"))))
        .collect()
}

pub fn gen_data(o: &Overrides, out: &Path, slides: usize, rows: usize, cols: usize) -> Result<()> {
    let mut rec = Recorder::start("gen-data");
    let mut cfg = load_config(o, &mut rec)?;
    if let Some(s) = o.seed {
        cfg.env.seed = s;
    }
    let manifest = write_dataset(out, &cfg.env, &cfg.data)?;
    rec.output(out.join(MANIFEST));
    for k in 0..slides {
        let class = (k % NUM_CLASSES) as u8;
        let slide = gen_slide(&cfg.env, class, rows, cols, derive_seed(cfg.env.seed, 0x51DE_0000 + k as u64))?;
        let dir = out.join("slides").join(format!("slide_{k:03}"));
        write_slide(&dir, &slide)?;
        rec.output(dir.join(SLIDE_RECORD));
    }
    println!("wrote {} tiles and {slides} slides to {}", manifest.tiles.len(), out.display());
    rec.finish(&out.join(RUN_MANIFEST), Some(cfg.env.seed), cfg.to_toml())
}

pub fn train(o: &Overrides, out: &Path, data: Option<&Path>) -> Result<()> {
    let mut rec = Recorder::start("train");
    let cfg = load_config(o, &mut rec)?;
    let ds = load_or_generate(&cfg, data, &mut rec)?;
    let art = cmd_train(&cfg, &ds, out, |s| {
        eprintln!(
            "epoch {:>3}  lr {:.6}  loss {:.4}  train_acc {:.3}  val_acc {:.3}  hit {:.3}",
            s.epoch, s.lr, s.mean_loss, s.train_accuracy, s.val.accuracy, s.val.hit_rate
        )
    })?;
    for p in [&art.best_checkpoint, &art.last_checkpoint] {
        rec.output(p.clone());
        rec.output(manifest_path(p));
    }
    for p in [&art.report_path, &art.log_path, &art.config_path] {
        rec.output(p.clone());
    }
    println!(
        "best val accuracy {:.4} at epoch {} ({} steps)",
        art.report.best_val_accuracy, art.report.best_epoch, art.report.steps
    );
    rec.finish(&out.join(RUN_MANIFEST), Some(cfg.train.seed), cfg.to_toml())
}

pub fn eval(o: &Overrides, ckpt: &Path, data: &Path, split: &str, out: &Path) -> Result<()> {
    let mut rec = Recorder::start("eval");
    rec.input(ckpt)?;
    let (net, params, _) = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = checkpoint_config(o, ckpt, &mut rec)?;
    rec.input(&data.join(MANIFEST))?;
    let (ds, _) = load_dataset(data)?;
    let tiles = match split {
        "val" => &ds.val,
        "train" => &ds.train,
        other => return Err(usage(format!("unknown split `{other}` (expected val or train)"))),
    };
    let report: EvalReport = evaluate(&net, &params, tiles, &cfg.effective().1, cfg.train.eval_seed)?;
    std::fs::create_dir_all(out)?;
    write_toml(&out.join("eval_report.toml"), &report, &mut rec)?;
    println!("accuracy {:.4}  hit_rate {:.4}  tiles {}", report.accuracy, report.hit_rate, report.tiles);
    rec.finish(&out.join(RUN_MANIFEST), Some(cfg.train.eval_seed), cfg.to_toml())
}

#[derive(Serialize)]
struct AblationFile<'a> {
    rows: &'a [AblationRow],
}

#[derive(Serialize)]
struct SweepFile<'a> {
    rows: &'a [SweepRow],
}

pub fn ablate(
    o: &Overrides,
    out: &Path,
    data: Option<&Path>,
    arms: &str,
    seeds: Option<&str>,
    sweep_axis: Option<&str>,
    values: Option<&str>,
) -> Result<()> {
    let mut rec = Recorder::start("ablate");
    let cfg = load_config(o, &mut rec)?;
    let ds = load_or_generate(&cfg, data, &mut rec)?;
    std::fs::create_dir_all(out)?;
    if let Some(axis) = sweep_axis {
        let (axis, name, default) = match axis {
            "steps" | "rois" => (SweepAxis::Steps, "steps", "4,5,6,8"),
            "roi-size" => (SweepAxis::RoiSize, "roi_size", "8,12,16"),
            other => return Err(usage(format!("unknown sweep `{other}` (expected steps or roi-size)"))),
        };
        let values: Vec<usize> = parse_list(values.unwrap_or(default), "sweep")?;
        let rows = sweep(&cfg, axis, &values, &ds, |r| {
            eprintln!("{name}={} accuracy {:.4} hit_rate {:.4}", r.value, r.accuracy, r.hit_rate)
        })?;
        write_toml(&out.join(format!("sweep_{name}.toml")), &SweepFile { rows: &rows }, &mut rec)?;
        let table = sweep_table(&rows);
        let md = out.join(format!("sweep_{name}.md"));
        write_atomic(&md, table.as_bytes())?;
        rec.output(md);
        print!("{table}");
    } else {
        let arms: Vec<Ablation> =
            arms.split(',').map(|a| Ablation::parse(a.trim())).collect::<roiscope_core::Result<_>>()?;
        let base = cfg.train.seed;
        let seeds: Vec<u64> = match seeds {
            Some(s) => parse_list(s, "seed")?,
            None => vec![base, base + 1, base + 2],
        };
        let rows = run_ablations(&cfg, &arms, &seeds, &ds, |a, s, r| {
            eprintln!("{} seed {s}: best val accuracy {:.4}", a.name(), r.best_val_accuracy)
        })?;
        write_toml(&out.join("ablation.toml"), &AblationFile { rows: &rows }, &mut rec)?;
        let table = ablation_table(&rows);
        let md = out.join("ablation.md");
        write_atomic(&md, table.as_bytes())?;
        rec.output(md);
        print!("{table}");
    }
    rec.finish(&out.join(RUN_MANIFEST), Some(cfg.train.seed), cfg.to_toml())
}

#[derive(Serialize)]
struct SlideReport {
    prediction: SlidePrediction,
    truth_label: u8,
    truth_pcms: f64,
    truth_area_ratios: [f64; NUM_CLASSES],
    contest: ContestScore,
}

pub fn score_slide(o: &Overrides, ckpt: &Path, slide_dir: &Path, out: &Path, contest: Option<&Path>) -> Result<()> {
    let mut rec = Recorder::start("score-slide");
    rec.input(ckpt)?;
    let (net, params, _) = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = checkpoint_config(o, ckpt, &mut rec)?;
    let policy = cfg.effective().1;
    let ccfg: ContestConfig = match contest {
        Some(path) => {
            rec.input(path)?;
            let text = std::fs::read_to_string(path)?;
            let c: ContestConfig = toml::from_str(&text).map_err(|e| CoreError::Config(e.to_string()))?;
            c.matrix.validate()?;
            c
        }
        None => ContestConfig::default(),
    };
    rec.input(&slide_dir.join(SLIDE_RECORD))?;
    let (record, tiles) = load_slide(slide_dir)?;

    let mut scores = Vec::with_capacity(tiles.len());
    let mut truth = Vec::with_capacity(tiles.len());
    for (i, (tile, entry)) in tiles.iter().zip(&record.tiles).enumerate() {
        let (ep, _) = eval_episode(&net, &params, tile, &policy, cfg.train.eval_seed, i as u64)?;
        let probs = ep.final_probs();
        let area = tissue_fraction(tile) * (tile.height() * tile.width()) as f64;
        scores.push(TileScore {
            id: entry.path.display().to_string(),
            score: ep.final_prediction(),
            confidence: probs.iter().cloned().fold(0.0, f64::max),
            tissue_area: area,
        });
        truth.push((entry.label, area));
    }
    let prediction = predict_slide(scores)?;
    let truth_area_ratios = pcms(&truth)?;
    let truth_pcms = truth_area_ratios[NUM_CLASSES - 1];
    let agreement: Vec<(u8, f64)> = prediction.tiles.iter().map(|t| (t.score, t.confidence)).collect();
    let contest = contest_score(prediction.slide_score, record.label, prediction.pcms, truth_pcms, &agreement, &ccfg)?;
    println!(
        "slide score {} (truth {})  points {}  combined {:.4}",
        prediction.slide_score, record.label, contest.points, contest.combined
    );
    std::fs::create_dir_all(out)?;
    let report = SlideReport { prediction, truth_label: record.label, truth_pcms, truth_area_ratios, contest };
    write_toml(&out.join("slide_report.toml"), &report, &mut rec)?;
    rec.finish(&out.join(RUN_MANIFEST), Some(cfg.train.eval_seed), cfg.to_toml())
}

/// On-disk attention trace.
#[derive(Debug, Serialize, Deserialize)]
pub struct Trace {
    pub locations: Vec<[f64; 2]>,
}

pub fn visualize(o: &Overrides, tile_path: &Path, out: &Path, ckpt: Option<&Path>, trace: Option<&Path>) -> Result<()> {
    let mut rec = Recorder::start("visualize");
    rec.input(tile_path)?;
    let tile = read_tile(tile_path)?;
    let (locations, window, cfg) = match (ckpt, trace) {
        (Some(ckpt), _) => {
            rec.input(ckpt)?;
            let (net, params, _) = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let cfg = checkpoint_config(o, ckpt, &mut rec)?;
            let (ep, _) = eval_episode(&net, &params, &tile, &cfg.effective().1, cfg.train.eval_seed, 0)?;
            (ep.locations.clone(), net.config().glimpse_size, cfg)
        }
        (None, Some(path)) => {
            rec.input(path)?;
            let text = std::fs::read_to_string(path)?;
            let t: Trace = toml::from_str(&text).map_err(|e| CoreError::Record { path: path.into(), detail: e.to_string() })?;
            let cfg = load_config(o, &mut rec)?;
            let locs = t.locations.iter().map(|&[x, y]| Location { x, y }).collect();
            (locs, cfg.net.glimpse_size, cfg)
        }
        (None, None) => {
            let cfg = load_config(o, &mut rec)?;
            (Vec::new(), cfg.net.glimpse_size, cfg)
        }
    };
    let samples = render_trace(&tile, &locations, window).map_err(|e| CoreError::Data(e.to_string()))?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(out, &encode_pixmap(tile.width(), tile.height(), &samples))?;
    rec.output(out);
    let trace_path = sidecar(out, "trace.toml");
    let trace = Trace { locations: locations.iter().map(|l| [l.x, l.y]).collect() };
    write_toml(&trace_path, &trace, &mut rec)?;
    println!("drew {} boxes to {}", locations.len(), out.display());
    rec.finish(&sidecar(out, "run_manifest.toml"), None, cfg.to_toml())
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    path.with_file_name(name)
}
