//! Bit-exact tile storage.
//!
//! A tile file (`*.img`) is a binary 16-bit RGB pixmap (`P6`, maxval 65535,
//! big-endian samples) immediately followed by a 16-bit greymap (`P5`) holding
//! the stain channel. Label, seed and relevance mask live in a TOML sidecar
//! next to it (`*.toml`), the mask run-length encoded.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Tile, CHANNELS};
use crate::error::{Error, Result};

const MAXVAL: u32 = 65535;

fn header(magic: &str, width: usize, height: usize) -> String {
    format!("{magic}\n{width} {height}\n{MAXVAL}\n")
}

/// Byte length of a `P6` + `P5` tile file of the given size.
pub fn tile_file_len(width: usize, height: usize) -> usize {
    header("P6", width, height).len()
        + width * height * CHANNELS * 2
        + header("P5", width, height).len()
        + width * height * 2
}

fn push_samples(out: &mut Vec<u8>, samples: &[u16]) {
    out.reserve(samples.len() * 2);
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
}

/// Encodes an RGB 16-bit pixmap (`P6`).
pub fn encode_pixmap(width: usize, height: usize, samples: &[u16]) -> Vec<u8> {
    assert_eq!(samples.len(), width * height * CHANNELS);
    let mut out = header("P6", width, height).into_bytes();
    push_samples(&mut out, samples);
    out
}

pub fn encode_tile(tile: &Tile) -> Vec<u8> {
    let mut out = encode_pixmap(tile.width, tile.height, &tile.pixels);
    out.extend_from_slice(header("P5", tile.width, tile.height).as_bytes());
    push_samples(&mut out, &tile.stain);
    out
}

struct Parsed {
    width: usize,
    height: usize,
    samples: Vec<u16>,
}

/// Parses one netpbm block starting at `*pos`, advancing `*pos` past it.
fn parse_block(bytes: &[u8], pos: &mut usize, magic: &str, path: &Path) -> Result<Parsed> {
    let bad = |detail: String| Error::Header { path: path.to_path_buf(), detail };
    let mut tokens = Vec::with_capacity(4);
    let mut i = *pos;
    while tokens.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad(format!("{magic} header ends after {} fields", tokens.len())));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates maxval from the payload
    if i >= bytes.len() {
        return Err(bad(format!("{magic} header not terminated")));
    }
    i += 1;

    if tokens[0] != magic {
        return Err(bad(format!("expected magic {magic}, found {:?}", tokens[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| bad(format!("invalid {what} {s:?}")))
    };
    let width = num(&tokens[1], "width")?;
    let height = num(&tokens[2], "height")?;
    let maxval = num(&tokens[3], "maxval")?;
    if maxval != MAXVAL as usize {
        return Err(bad(format!("maxval must be {MAXVAL}, found {maxval}")));
    }
    let channels = if magic == "P6" { CHANNELS } else { 1 };
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    let expected = count * 2;
    let available = bytes.len() - i;
    if available < expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, found: available });
    }
    let samples = bytes[i..i + expected]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    *pos = i + expected;
    Ok(Parsed { width, height, samples })
}

/// Decodes a standalone `P6` pixmap into `(width, height, samples)`.
pub fn decode_pixmap(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let mut pos = 0;
    let p = parse_block(bytes, &mut pos, "P6", path)?;
    Ok((p.width, p.height, p.samples))
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskRecord {
    width: usize,
    height: usize,
    /// Alternating run lengths, starting with a run of `false`.
    runs: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    label: u8,
    /// Decimal string: TOML integers cannot hold every `u64`.
    seed: String,
    width: usize,
    height: usize,
    mask: MaskRecord,
}

fn encode_runs(mask: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn decode_runs(runs: &[u32], n: usize) -> Option<Vec<bool>> {
    let mut out = Vec::with_capacity(n);
    let mut value = false;
    for &r in runs {
        out.extend(std::iter::repeat_n(value, r as usize));
        value = !value;
    }
    (out.len() == n).then_some(out)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

/// Writes `path` (pixmap + stain) and its sidecar record.
pub fn write_tile(path: &Path, tile: &Tile) -> Result<()> {
    let sidecar = Sidecar {
        label: tile.label,
        seed: tile.seed.to_string(),
        width: tile.width,
        height: tile.height,
        mask: MaskRecord { width: tile.width, height: tile.height, runs: encode_runs(&tile.relevance) },
    };
    let text = toml::to_string(&sidecar).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, &encode_tile(tile))?;
    write_atomic(&sidecar_path(path), text.as_bytes())
}

pub fn read_tile(path: &Path) -> Result<Tile> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let rgb = parse_block(&bytes, &mut pos, "P6", path)?;
    let stain = parse_block(&bytes, &mut pos, "P5", path)?;
    if (stain.width, stain.height) != (rgb.width, rgb.height) {
        return Err(Error::shape(format!(
            "{}: stain block {}x{} does not match pixmap {}x{}",
            path.display(),
            stain.width,
            stain.height,
            rgb.width,
            rgb.height
        )));
    }

    let side = sidecar_path(path);
    let text = fs::read_to_string(&side)?;
    let rec: Sidecar =
        toml::from_str(&text).map_err(|e| Error::Record { path: side.clone(), detail: e.to_string() })?;
    let seed = rec
        .seed
        .parse::<u64>()
        .map_err(|e| Error::Record { path: side.clone(), detail: format!("seed: {e}") })?;
    if (rec.width, rec.height) != (rgb.width, rgb.height)
        || (rec.mask.width, rec.mask.height) != (rgb.width, rgb.height)
    {
        return Err(Error::shape(format!(
            "{}: mask {}x{} / record {}x{} do not match pixmap {}x{}",
            side.display(),
            rec.mask.width,
            rec.mask.height,
            rec.width,
            rec.height,
            rgb.width,
            rgb.height
        )));
    }
    let relevance = decode_runs(&rec.mask.runs, rgb.width * rgb.height)
        .ok_or_else(|| Error::shape(format!("{}: mask runs do not cover the pixmap", side.display())))?;
    Tile::new(rgb.height, rgb.width, rgb.samples, stain.samples, relevance, rec.label, seed)
}

/// Writes to a temporary sibling then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::quantize;
    use proptest::prelude::*;

    fn sample_tile(n: usize, seed: u64) -> Tile {
        let mut t = Tile::from_fn(n, n, 3, seed, |y, x, c| ((y * 31 + x * 17 + c * 7) % 101) as f64 / 100.0).unwrap();
        t.stain = (0..n * n).map(|i| if i % 9 == 0 { quantize(0.8) } else { 0 }).collect();
        t.relevance = t.stain.iter().map(|&s| s > 0).collect();
        t
    }

    #[test]
    fn file_size_matches_declared_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.img");
        write_tile(&p, &sample_tile(256, 1)).unwrap();
        let len = fs::metadata(&p).unwrap().len() as usize;
        // "P6\n256 256\n65535\n" is 17 bytes, 256*256*3*2 payload, same for P5 with 1 channel
        assert_eq!(len, 17 + 393_216 + 17 + 131_072);
        assert_eq!(len, tile_file_len(256, 256));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.img");
        write_tile(&p, &sample_tile(32, 1)).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 3]).unwrap();
        assert!(matches!(read_tile(&p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn malformed_header_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.img");
        write_tile(&p, &sample_tile(32, 1)).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[1] = b'3';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tile(&p), Err(Error::Header { .. })));
    }

    #[test]
    fn mask_shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.img");
        write_tile(&p, &sample_tile(32, 1)).unwrap();
        let side = sidecar_path(&p);
        let text = fs::read_to_string(&side).unwrap();
        let bad = text.replacen("[mask]\nwidth = 32", "[mask]\nwidth = 16", 1);
        assert_ne!(bad, text);
        fs::write(&side, bad).unwrap();
        assert!(matches!(read_tile(&p), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_exact(seed in any::<u64>(), k in 1usize..4) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.img");
            let mut t = sample_tile(16 * k, seed);
            t.stain.iter_mut().enumerate().for_each(|(i, s)| *s = s.wrapping_add((seed as u16).wrapping_mul(i as u16)));
            t.relevance = t.stain.iter().map(|&s| s > 0).collect();
            write_tile(&p, &t).unwrap();
            prop_assert_eq!(read_tile(&p).unwrap(), t);
        }
    }
}
