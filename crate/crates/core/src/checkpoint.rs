//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, JSON header,
//! then the raw f64 little-endian payload for every array in header order
//! (parameters first, then extra arrays such as optimizer state). The header
//! carries shapes and flags, so a checkpoint round-trips bit-exactly and a
//! truncated or mislabeled file fails loudly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{ManifestEntry, ParamSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"IMTEXT\x00\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExtraEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    config: ModelConfig,
    params: Vec<ManifestEntry>,
    extra: Vec<ExtraEntry>,
}

/// A model snapshot: config, parameters, training step, and any auxiliary
/// arrays (optimizer accumulators) keyed by name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamSet,
    pub extra: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, step: u64, params: ParamSet) -> Self {
        Checkpoint { config, step, params, extra: BTreeMap::new() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            params: self.params.manifest(),
            extra: self
                .extra
                .iter()
                .map(|(name, t)| ExtraEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)?;

        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header_json).map_err(io)?;
        for entry in &header.params {
            let t = self.params.get(&entry.name).expect("manifest lists stored params");
            write_f64s(&mut w, t.value.data()).map_err(io)?;
        }
        for entry in &header.extra {
            write_f64s(&mut w, self.extra[&entry.name].data()).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::ManifestMismatch {
                entry: "magic".into(),
                detail: "not a checkpoint file".into(),
            });
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4).map_err(io)?;
        let version = u32::from_le_bytes(buf4);
        if version != FORMAT_VERSION {
            return Err(Error::ManifestMismatch {
                entry: "format_version".into(),
                detail: format!("file has version {version}, expected {FORMAT_VERSION}"),
            });
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8).map_err(io)?;
        let header_len = u64::from_le_bytes(buf8) as usize;
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json).map_err(io)?;
        let header: Header = serde_json::from_slice(&header_json)?;
        header.config.validate()?;

        let mut params = ParamSet::new();
        for entry in &header.params {
            let data = read_f64s(&mut r, entry.shape.iter().product()).map_err(io)?;
            let t = Tensor::from_vec(entry.shape.clone(), data).map_err(|_| {
                Error::ManifestMismatch {
                    entry: entry.name.clone(),
                    detail: "payload does not match declared shape or is non-finite".into(),
                }
            })?;
            params.insert_with_flag(&entry.name, t, entry.trainable)?;
        }
        let mut extra = BTreeMap::new();
        for entry in &header.extra {
            let data = read_f64s(&mut r, entry.shape.iter().product()).map_err(io)?;
            let t = Tensor::from_vec(entry.shape.clone(), data).map_err(|_| {
                Error::ManifestMismatch {
                    entry: entry.name.clone(),
                    detail: "payload does not match declared shape or is non-finite".into(),
                }
            })?;
            extra.insert(entry.name.clone(), t);
        }
        // A well-formed file ends exactly at the last payload byte.
        let mut probe = [0u8; 1];
        match r.read(&mut probe).map_err(io)? {
            0 => {}
            _ => {
                return Err(Error::ManifestMismatch {
                    entry: "payload".into(),
                    detail: "trailing bytes after declared arrays".into(),
                })
            }
        }
        Ok(Checkpoint { config: header.config, step: header.step, params, extra })
    }
}

fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> std::io::Result<()> {
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("imtext-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::init(ModelConfig::toy(128), 11).unwrap();
        let mut ckpt = Checkpoint::new(model.cfg.clone(), 42, model.params.clone());
        ckpt.extra.insert("opt.step_count".into(), Tensor::scalar(42.0));
        ckpt.extra.insert("opt.vhat.row".into(), Tensor::full(vec![3, 2], 0.25));
        let path = tmp("roundtrip.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config, model.cfg);
        assert!(loaded.params.bit_eq(&ckpt.params));
        assert_eq!(loaded.extra.len(), 2);
        assert!(loaded.extra["opt.vhat.row"].bit_eq(&ckpt.extra["opt.vhat.row"]));
    }

    #[test]
    fn trainable_flags_survive() {
        let model = Model::init(ModelConfig::toy(128), 3).unwrap();
        let mut params = model.params.clone();
        params.freeze_by_prefix(&["vit.".into()]);
        let ckpt = Checkpoint::new(model.cfg.clone(), 0, params);
        let path = tmp("flags.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        for (name, p) in loaded.params.iter() {
            assert_eq!(p.trainable, !name.starts_with("vit."), "{name}");
        }
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = Checkpoint::load(Path::new("/nonexistent/nope.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { .. }), "{err:?}");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let path = tmp("bad_magic.ckpt");
        std::fs::write(&path, b"NOTCKPT\x00rest").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::ManifestMismatch { .. }), "{err:?}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let model = Model::init(ModelConfig::toy(128), 9).unwrap();
        let ckpt = Checkpoint::new(model.cfg.clone(), 1, model.params.clone());
        let path = tmp("trunc.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let model = Model::init(ModelConfig::toy(128), 9).unwrap();
        let ckpt = Checkpoint::new(model.cfg.clone(), 1, model.params.clone());
        let path = tmp("trailing.ckpt");
        ckpt.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::ManifestMismatch { .. }), "{err:?}");
    }
}
