//! Binary parameter files with a TOML manifest alongside.
//!
//! Layout: magic `RSCK`, `u32` version, `u32` array count, then per array a
//! length-prefixed UTF-8 name, `u32` rank, `u64` dims and little-endian `f64`
//! values. All integers are little-endian.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{NetConfig, Network};
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::imaging::raster::write_atomic;

const MAGIC: &[u8; 4] = b"RSCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub net: NetConfig,
    pub epoch: usize,
    pub step: u64,
    /// Decimal string; TOML integers are signed 64-bit.
    pub seed: String,
    pub config_hash: String,
    pub payload_sha256: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stable hash of a network configuration (of its TOML rendering).
pub fn config_hash(cfg: &NetConfig) -> String {
    sha256_hex(toml::to_string(cfg).expect("config serializes").as_bytes())
}

pub fn encode_params(p: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + p.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(p.specs().len() as u32).to_le_bytes());
    for (spec, values) in p.named() {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &d in &spec.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a parameter file against the layout of `net`; names, shapes and
/// order must all match.
pub fn decode_params(net: &Network, bytes: &[u8], path: &Path) -> Result<ParameterSet> {
    let header = |detail: String| Error::Header { path: path.to_path_buf(), detail };
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(header("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(header(format!("unsupported version {version}")));
    }
    let specs = net.specs();
    let count = r.u32()? as usize;
    if count != specs.len() {
        return Err(header(format!("{count} arrays, network has {}", specs.len())));
    }
    let mut values = Vec::with_capacity(specs.iter().map(|s| s.len()).sum());
    for spec in specs.iter() {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| header("non-UTF-8 name".into()))?;
        if name != spec.name {
            return Err(header(format!("expected array `{}`, found `{name}`", spec.name)));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != spec.shape {
            return Err(Error::shape(format!("`{name}`: stored {shape:?}, expected {:?}", spec.shape)));
        }
        for _ in 0..spec.len() {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
        }
    }
    if r.pos != bytes.len() {
        return Err(header(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ParameterSet::from_values(std::sync::Arc::clone(specs), values)
}

/// Writes `path` (binary) and its manifest, each atomically.
pub fn save(path: &Path, net: &Network, p: &ParameterSet, epoch: usize, step: u64, seed: u64) -> Result<CheckpointManifest> {
    net.check_params(p)?;
    let payload = encode_params(p);
    let manifest = CheckpointManifest {
        net: net.config().clone(),
        epoch,
        step,
        seed: seed.to_string(),
        config_hash: config_hash(net.config()),
        payload_sha256: sha256_hex(&payload),
    };
    write_atomic(path, &payload)?;
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&manifest_path(path), text.as_bytes())?;
    Ok(manifest)
}

/// Loads a checkpoint, rebuilding the network from its manifest.
pub fn load(path: &Path) -> Result<(Network, ParameterSet, CheckpointManifest)> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath)?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Header { path: mpath.clone(), detail: e.to_string() })?;
    let bytes = std::fs::read(path)?;
    if sha256_hex(&bytes) != manifest.payload_sha256 {
        return Err(Error::Header { path: path.to_path_buf(), detail: "payload hash mismatch".into() });
    }
    let net = Network::new(manifest.net.clone())?;
    let params = decode_params(&net, &bytes, path)?;
    Ok((net, params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            tile_size: 32,
            glimpse_size: 4,
            stem_channels: 2,
            stage_channels: 2,
            branch_features: 3,
            context_features: 4,
            hidden1: 5,
            hidden2: 4,
            ..NetConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let net = Network::new(tiny()).unwrap();
        let p = net.init_params(11);
        save(&path, &net, &p, 3, 40, u64::MAX).unwrap();
        let (net2, p2, m) = load(&path).unwrap();
        assert_eq!(p2.values(), p.values());
        assert_eq!(net2.config(), net.config());
        assert_eq!(m.seed, u64::MAX.to_string());
        assert_eq!(m.epoch, 3);
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let net = Network::new(tiny()).unwrap();
        let bytes = encode_params(&net.init_params(1));
        let path = Path::new("x.ckpt");
        assert!(matches!(decode_params(&net, &bytes[..bytes.len() - 3], path), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_params(&net, &bad, path), Err(Error::Header { .. })));
        let other = Network::new(NetConfig { hidden1: 6, ..tiny() }).unwrap();
        assert!(decode_params(&other, &bytes, path).is_err());
    }

    #[test]
    fn tampered_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let net = Network::new(tiny()).unwrap();
        save(&path, &net, &net.init_params(2), 0, 0, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(load(&path).is_err());
    }
}
