//! Labelled tile collections: generation, on-disk layout and splits.
//!
//! On disk a dataset is `<root>/<class>/<seed>.img` (+ `.toml` sidecars) and a
//! `<root>/manifest.toml` listing every tile with its split.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::raster::{read_tile, write_atomic, write_tile};
use crate::imaging::Tile;
use crate::rng::{derive_seed, fork};
use crate::synthenv::{gen_tile, EnvConfig, SyntheticSlide, NUM_CLASSES};

pub const MANIFEST: &str = "manifest.toml";
pub const SLIDE_RECORD: &str = "slide.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub val_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_per_class: 400, val_per_class: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub label: u8,
    pub seed: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub env: EnvConfig,
    pub data: DataConfig,
    pub tiles: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Tile>,
    pub val: Vec<Tile>,
}

impl Dataset {
    pub fn class_counts(tiles: &[Tile]) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        tiles.iter().for_each(|t| c[t.label() as usize] += 1);
        c
    }
}

/// Seed of the `index`-th tile of `class` in `split`; distinct across all three.
pub fn tile_seed(root_seed: u64, class: u8, split: Split, index: usize) -> u64 {
    let stream = (u64::from(class) << 40) | (u64::from(split == Split::Val) << 32) | index as u64;
    derive_seed(root_seed, stream)
}

fn plan(env: &EnvConfig, data: &DataConfig) -> Vec<(u8, Split, u64)> {
    let mut out = Vec::new();
    for (split, n) in [(Split::Train, data.train_per_class), (Split::Val, data.val_per_class)] {
        for class in 0..NUM_CLASSES as u8 {
            for i in 0..n {
                out.push((class, split, tile_seed(env.seed, class, split, i)));
            }
        }
    }
    out
}

/// Generates a dataset in memory; tile order is class-major within each split.
pub fn generate(env: &EnvConfig, data: &DataConfig) -> Result<Dataset> {
    env.validate()?;
    let mut ds = Dataset::default();
    for (class, split, seed) in plan(env, data) {
        let t = gen_tile(env, class, seed)?;
        match split {
            Split::Train => ds.train.push(t),
            Split::Val => ds.val.push(t),
        }
    }
    Ok(ds)
}

/// Generates a dataset and writes it under `root`. Returns the manifest.
pub fn write_dataset(root: &Path, env: &EnvConfig, data: &DataConfig) -> Result<DatasetManifest> {
    env.validate()?;
    let mut tiles = Vec::new();
    for (class, split, seed) in plan(env, data) {
        let rel = PathBuf::from(class.to_string()).join(format!("{seed}.img"));
        write_tile(&root.join(&rel), &gen_tile(env, class, seed)?)?;
        tiles.push(ManifestEntry { path: rel, label: class, seed: seed.to_string(), split });
    }
    let manifest = DatasetManifest { env: env.clone(), data: data.clone(), tiles };
    let text = toml::to_string(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&root.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Record { path, detail: e.to_string() })
}

/// Loads every tile listed in the manifest, checking labels against the records.
pub fn load_dataset(root: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest = read_manifest(root)?;
    let mut ds = Dataset::default();
    for e in &manifest.tiles {
        let tile = read_tile(&root.join(&e.path))?;
        if tile.label() != e.label {
            return Err(Error::Data(format!(
                "{}: label {} in tile record, {} in manifest",
                e.path.display(),
                tile.label(),
                e.label
            )));
        }
        match e.split {
            Split::Train => ds.train.push(tile),
            Split::Val => ds.val.push(tile),
        }
    }
    Ok((ds, manifest))
}

/// Per-class split of `tiles` holding out `round(fraction · n_c)` of each
/// class, chosen by a seeded shuffle. Returns `(train, val)`.
pub fn stratified_split(tiles: Vec<Tile>, fraction: f64, seed: u64) -> Result<(Vec<Tile>, Vec<Tile>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("validation fraction {fraction} outside [0, 1)")));
    }
    let mut by_class: Vec<Vec<Tile>> = vec![Vec::new(); NUM_CLASSES];
    tiles.into_iter().for_each(|t| by_class[t.label() as usize].push(t));
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, mut group) in by_class.into_iter().enumerate() {
        group.shuffle(&mut fork(seed, c as u64));
        let k = (fraction * group.len() as f64).round() as usize;
        val.extend(group.drain(..k));
        train.extend(group);
    }
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideTileEntry {
    pub path: PathBuf,
    pub row: usize,
    pub col: usize,
    pub label: u8,
    pub tissue_fraction: f64,
}

/// `<dir>/slide.toml`: the slide label and its row-major tile grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub label: u8,
    pub rows: usize,
    pub cols: usize,
    pub tiles: Vec<SlideTileEntry>,
}

pub fn write_slide(dir: &Path, slide: &SyntheticSlide) -> Result<SlideRecord> {
    let mut tiles = Vec::with_capacity(slide.tiles.len());
    for (i, (tile, &tissue)) in slide.tiles.iter().zip(&slide.tissue_fraction).enumerate() {
        let (row, col) = (i / slide.cols, i % slide.cols);
        let rel = PathBuf::from(format!("r{row:03}_c{col:03}.img"));
        write_tile(&dir.join(&rel), tile)?;
        tiles.push(SlideTileEntry { path: rel, row, col, label: tile.label(), tissue_fraction: tissue });
    }
    let record = SlideRecord { label: slide.slide_label, rows: slide.rows, cols: slide.cols, tiles };
    let text = toml::to_string(&record).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&dir.join(SLIDE_RECORD), text.as_bytes())?;
    Ok(record)
}

pub fn load_slide(dir: &Path) -> Result<(SlideRecord, Vec<Tile>)> {
    let path = dir.join(SLIDE_RECORD);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let record: SlideRecord = toml::from_str(&text).map_err(|e| Error::Record { path, detail: e.to_string() })?;
    if record.tiles.len() != record.rows * record.cols || record.tiles.is_empty() {
        return Err(Error::Data(format!(
            "slide lists {} tiles for a {}x{} grid",
            record.tiles.len(),
            record.rows,
            record.cols
        )));
    }
    let tiles = record.tiles.iter().map(|e| read_tile(&dir.join(&e.path))).collect::<Result<Vec<_>>>()?;
    Ok((record, tiles))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (EnvConfig, DataConfig) {
        (EnvConfig { tile_size: 32, seed: 5, ..EnvConfig::default() }, DataConfig { train_per_class: 3, val_per_class: 1 })
    }

    #[test]
    fn disk_round_trip_matches_memory() {
        let (env, data) = small();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &env, &data).unwrap();
        assert_eq!(m.tiles.len(), 16);
        let (ds, _) = load_dataset(dir.path()).unwrap();
        let mem = generate(&env, &data).unwrap();
        assert_eq!(ds.train, mem.train);
        assert_eq!(ds.val, mem.val);
        assert_eq!(Dataset::class_counts(&ds.train), [3; 4]);
        assert!(dir.path().join("2").is_dir());
    }

    #[test]
    fn seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for c in 0..4 {
            for s in [Split::Train, Split::Val] {
                for i in 0..50 {
                    assert!(seen.insert(tile_seed(1, c, s, i)));
                }
            }
        }
    }

    #[test]
    fn split_is_stratified() {
        let (env, data) = small();
        let mut data = data;
        data.train_per_class = 20;
        let ds = generate(&env, &data).unwrap();
        let (train, val) = stratified_split(ds.train, 0.15, 3).unwrap();
        assert_eq!(Dataset::class_counts(&val), [3; 4]);
        assert_eq!(Dataset::class_counts(&train), [17; 4]);
    }

    #[test]
    fn slide_round_trip() {
        let (env, _) = small();
        let slide = crate::synthenv::gen_slide(&env, 1, 2, 3, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rec = write_slide(dir.path(), &slide).unwrap();
        let (back, tiles) = load_slide(dir.path()).unwrap();
        assert_eq!(rec, back);
        assert_eq!(tiles, slide.tiles);
        assert_eq!(back.tiles[4].row, 1);
        assert_eq!(back.tiles[4].col, 1);
    }

    #[test]
    fn missing_manifest_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }
}
