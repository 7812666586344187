//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.txt` plus one binary block
//! file per parameter:
//!
//! ```text
//! kind = encoder
//! config.resolution = 32
//! config.code_dim = 16
//! param backbone.stem.weight 8 3 3 3
//! param backbone.stem.scale 8
//! ```
//!
//! `param` lines give the name and shape; the values live in
//! `<name>.bin` in the block format of [`crate::latent`] (rank, dims as u64
//! little-endian, then f32 little-endian values).

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::codec;
use crate::params::ParamSet;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";

/// In-memory checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: IndexMap<String, String>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, params: ParamSet) -> Self {
        Self {
            kind: kind.into(),
            config: IndexMap::new(),
            params,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    /// Parses config entry `key`, failing with a checkpoint error naming the
    /// manifest.
    pub fn config_value<T: std::str::FromStr>(&self, dir: &Path, key: &str) -> Result<T> {
        let raw = self
            .config
            .get(key)
            .ok_or_else(|| Error::checkpoint(dir.join(MANIFEST), format!("missing config.{key}")))?;
        raw.parse().map_err(|_| {
            Error::checkpoint(dir.join(MANIFEST), format!("config.{key} = '{raw}' is malformed"))
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("kind = {}\n", self.kind);
        for (k, v) in &self.config {
            manifest.push_str(&format!("config.{k} = {v}\n"));
        }
        for (name, t) in self.params.iter() {
            manifest.push_str("param ");
            manifest.push_str(name);
            for d in t.shape() {
                manifest.push_str(&format!(" {d}"));
            }
            manifest.push('\n');
            let path = weight_path(dir, name);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            codec::write_block(&mut w, t)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint, checking the kind and that every weight file's
    /// header agrees with the manifest.
    pub fn load(dir: &Path, expected_kind: &str) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut kind = None;
        let mut config = IndexMap::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| Error::checkpoint(&manifest_path, format!("line {}: {why}", lineno + 1));
            if let Some(rest) = line.strip_prefix("param ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| bad("param without a name"))?;
                let dims = parts
                    .map(str::parse)
                    .collect::<std::result::Result<Vec<usize>, _>>()
                    .map_err(|_| bad("non-integer dimension"))?;
                shapes.push((name.to_string(), dims));
            } else if let Some((k, v)) = line.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                if k == "kind" {
                    kind = Some(v.to_string());
                } else if let Some(key) = k.strip_prefix("config.") {
                    config.insert(key.to_string(), v.to_string());
                } else {
                    return Err(bad(&format!("unknown key '{k}'")));
                }
            } else {
                return Err(bad("unrecognised line"));
            }
        }
        let kind = kind.ok_or_else(|| Error::checkpoint(&manifest_path, "missing 'kind'"))?;
        if kind != expected_kind {
            return Err(Error::checkpoint(
                &manifest_path,
                format!("holds a {kind} checkpoint, expected {expected_kind}"),
            ));
        }

        let mut params = ParamSet::new();
        for (name, dims) in shapes {
            let path = weight_path(dir, &name);
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut r = BufReader::new(file);
            let header = codec::read_shape(&mut r)
                .map_err(|e| Error::checkpoint(&path, format!("unreadable shape header: {e}")))?;
            if header != dims {
                return Err(Error::checkpoint(
                    &path,
                    format!("shape {header:?} does not match manifest {dims:?}"),
                ));
            }
            let n: usize = dims.iter().product();
            let mut buf = vec![0u8; n * 4];
            std::io::Read::read_exact(&mut r, &mut buf)
                .map_err(|e| Error::checkpoint(&path, format!("truncated values: {e}")))?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.insert(name, latentswap_autograd::Tensor::new(dims, data));
        }
        params.check_finite().map_err(|e| Error::checkpoint(dir, e.to_string()))?;
        Ok(Self {
            kind,
            config,
            params,
        })
    }
}

fn weight_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

/// Rounds every parameter through `f32`, the on-disk precision, so that an
/// in-memory model behaves exactly like its saved-and-reloaded copy.
pub fn quantize(params: &mut ParamSet) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use latentswap_autograd::Tensor;

    fn sample() -> Checkpoint {
        let mut p = ParamSet::new();
        p.insert("a.weight", Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        p.insert("a.bias", Tensor::new([2], vec![0.5, -0.5]));
        Checkpoint::new("toy", p).with("resolution", 32)
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path(), "toy").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.config_value::<usize>(dir.path(), "resolution").unwrap(), 32);
    }

    #[test]
    fn corrupted_header_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let path = dir.path().join("a.bias.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[..8].copy_from_slice(&77u64.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        match Checkpoint::load(dir.path(), "toy") {
            Err(Error::Checkpoint { path: p, .. }) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_disagreeing_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let path = dir.path().join("a.weight.bin");
        let mut f = fs::File::create(&path).unwrap();
        codec::write_block(&mut f, &Tensor::zeros([4])).unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path(), "toy"),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn missing_weight_file_is_io() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("a.bias.bin")).unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path(), "toy"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path(), "encoder"),
            Err(Error::Checkpoint { .. })
        ));
    }
}
