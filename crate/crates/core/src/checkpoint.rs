//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0 | 8 | magic `SPKCAMCK` |
//! | 8 | 4 | format version, `u32` (currently 1) |
//! | 12 | 8 | payload length `P` in bytes, `u64` |
//! | 20 | P | payload |
//! | 20 + P | 4 | CRC-32 (IEEE) of bytes `[0, 20 + P)` |
//!
//! Payload:
//!
//! - `u32` config length, then the config as UTF-8 text: one `key = value`
//!   line per field, in a fixed order (see [`Checkpoint::config_text`]);
//! - `u32` section count, then per section: `u8` kind (0 = parameter,
//!   1 = batchnorm running statistic), `u16` name length, name bytes,
//!   `u8` rank, `rank` x `u64` dims, then `prod(dims)` x `f64` values.
//!
//! Sections are written in ascending name order, parameters before buffers.

use std::fs;
use std::path::Path;

use crate::augment::DaMode;
use crate::autodiff::{NamedTensors, Tensor};
use crate::corpus::InterferenceKind;
use crate::error::{Error, Result};
use crate::net::{ModelConfig, SpeakerNet};

pub const MAGIC: &[u8; 8] = b"SPKCAMCK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingMetadata {
    pub mode: DaMode,
    pub interference: Option<InterferenceKind>,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SpeakerNet,
    pub metadata: TrainingMetadata,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_array(value: &str, key: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::MalformedCheckpoint(format!("{key} = {value}")))?;
    parts
        .try_into()
        .map_err(|_| Error::MalformedCheckpoint(format!("{key} needs 4 entries")))
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn config_text(&self) -> String {
        let c = self.model.config();
        let m = &self.metadata;
        format!(
            "model.n_mels = {}\nmodel.stage_channels = {}\nmodel.blocks_per_stage = {}\n\
             model.embedding_dim = {}\nmodel.n_speakers = {}\nmodel.se_reduction = {}\n\
             model.stem_stride = {}\nmodel.seed = {}\ntrain.mode = {}\ntrain.interference = {}\n\
             train.epochs = {}\ntrain.seed = {}\n",
            c.n_mels,
            join(&c.stage_channels),
            join(&c.blocks_per_stage),
            c.embedding_dim,
            c.n_speakers,
            c.se_reduction,
            c.stem_stride,
            c.seed,
            m.mode,
            m.interference.map_or("none".to_string(), |k| k.to_string()),
            m.epochs,
            m.seed,
        )
    }

    fn parse_config_text(text: &str) -> Result<(ModelConfig, TrainingMetadata)> {
        let mut c = ModelConfig::default();
        let mut m = TrainingMetadata {
            mode: DaMode::Base,
            interference: None,
            epochs: 0,
            seed: 0,
        };
        let bad = |k: &str, v: &str| Error::MalformedCheckpoint(format!("config line {k} = {v}"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::MalformedCheckpoint(format!("config line {line:?}")))?;
            let num = || v.parse::<u64>().map_err(|_| bad(k, v));
            match k {
                "model.n_mels" => c.n_mels = num()? as usize,
                "model.stage_channels" => c.stage_channels = parse_array(v, k)?,
                "model.blocks_per_stage" => c.blocks_per_stage = parse_array(v, k)?,
                "model.embedding_dim" => c.embedding_dim = num()? as usize,
                "model.n_speakers" => c.n_speakers = num()? as usize,
                "model.se_reduction" => c.se_reduction = num()? as usize,
                "model.stem_stride" => c.stem_stride = num()? as usize,
                "model.seed" => c.seed = num()?,
                "train.mode" => m.mode = v.parse().map_err(|_| bad(k, v))?,
                "train.interference" => {
                    m.interference = if v == "none" {
                        None
                    } else {
                        Some(v.parse().map_err(|_| bad(k, v))?)
                    }
                }
                "train.epochs" => m.epochs = num()? as usize,
                "train.seed" => m.seed = num()?,
                _ => return Err(Error::MalformedCheckpoint(format!("unknown config key {k}"))),
            }
        }
        Ok((c, m))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let text = self.config_text();
        payload.extend_from_slice(&(text.len() as u32).to_le_bytes());
        payload.extend_from_slice(text.as_bytes());
        let params = self.model.params();
        let buffers = self.model.buffers();
        payload.extend_from_slice(&((params.len() + buffers.len()) as u32).to_le_bytes());
        for (kind, map) in [(0u8, params), (1u8, buffers)] {
            for (name, t) in map {
                payload.push(kind);
                payload.extend_from_slice(&(name.len() as u16).to_le_bytes());
                payload.extend_from_slice(name.as_bytes());
                payload.push(t.shape().len() as u8);
                for &d in t.shape() {
                    payload.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let payload_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let expected = (HEADER_LEN as u64).saturating_add(payload_len).saturating_add(4);
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len() as u64,
            });
        }
        if bytes.len() as u64 > expected {
            return Err(Error::MalformedCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() as u64 - expected
            )));
        }
        let body_end = HEADER_LEN + payload_len as usize;
        let stored = u32::from_le_bytes(bytes[body_end..body_end + 4].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let mut r = Reader {
            bytes: &bytes[HEADER_LEN..body_end],
            pos: 0,
        };
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::MalformedCheckpoint("config text is not UTF-8".into()))?;
        let (config, metadata) = Self::parse_config_text(text)?;
        let count = r.u32()?;
        let mut params = NamedTensors::new();
        let mut buffers = NamedTensors::new();
        for _ in 0..count {
            let kind = r.u8()?;
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::MalformedCheckpoint("section name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel.checked_mul(8).ok_or_else(|| Error::MalformedCheckpoint(format!("{name} too large")))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)?;
            let target = match kind {
                0 => &mut params,
                1 => &mut buffers,
                k => return Err(Error::MalformedCheckpoint(format!("section kind {k}"))),
            };
            if target.insert(name.clone(), tensor).is_some() {
                return Err(Error::MalformedCheckpoint(format!("duplicate section {name}")));
            }
        }
        if r.pos != r.bytes.len() {
            return Err(Error::MalformedCheckpoint("unparsed payload bytes".into()));
        }
        Ok(Self {
            model: SpeakerNet::from_parts(config, params, buffers)?,
            metadata,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedCheckpoint("section runs past payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and reports a [`Error::ConfigMismatch`] if it was
/// trained for a different feature dimension.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, n_mels: usize) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.config().n_mels != n_mels {
        return Err(Error::ConfigMismatch {
            field: "n_mels",
            expected: n_mels.to_string(),
            found: ck.config().n_mels.to_string(),
        });
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            n_mels: 10,
            stage_channels: [2, 4, 4, 8],
            embedding_dim: 4,
            n_speakers: 3,
            ..ModelConfig::default()
        };
        Checkpoint {
            model: SpeakerNet::new(cfg).unwrap(),
            metadata: TrainingMetadata {
                mode: DaMode::ActDa,
                interference: Some(InterferenceKind::Speech),
                epochs: 3,
                seed: 42,
            },
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn payload_corruption_is_a_checksum_error() {
        let mut bytes = sample().to_bytes();
        let i = bytes.len() - 20;
        bytes[i] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn truncation_version_and_magic_are_distinct() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 7]), Err(Error::Truncated { .. })));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::UnsupportedVersion { found: 9, .. })));
        let mut m = bytes;
        m[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&m), Err(Error::BadMagic)));
    }

    #[test]
    fn n_mels_mismatch_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&sample(), &p).unwrap();
        let err = load_checkpoint_expecting(&p, 40).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch { field: "n_mels", .. }), "{err}");
        assert!(load_checkpoint_expecting(&p, 10).is_ok());
    }
}
