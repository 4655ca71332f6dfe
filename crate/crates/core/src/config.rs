//! Run configuration: one TOML document holding the global seed, paths and
//! every module's settings. Unknown keys are rejected.
//!
//! ```toml
//! seed = 0
//!
//! [paths]
//! results = "results"     # every output goes below this directory
//! audio_root = "."        # resolves WAV paths of ingested manifests
//!
//! [corpus]   # synthetic corpus size, durations, overlap gain range
//! [dsp]      # sample_rate, frame_length, hop, window, n_mels, floor_db
//! [model]    # stage_channels, blocks_per_stage, embedding_dim, ...
//! [train]    # mode, epochs, batch_size, learning_rate, momentum, crop_frames, [train.mix]
//! [analysis] # frame_threshold, deletion_thresholds, topk, max_test_utterances
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::TrainConfig;
use crate::corpus::{derive_seed, CorpusConfig};
use crate::dsp::{FeatureExtractor, StftConfig, Window, DEFAULT_FLOOR_DB, DEFAULT_N_MELS, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::net::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub results: PathBuf,
    pub audio_root: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            results: PathBuf::from("results"),
            audio_root: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub frame_length: usize,
    pub hop: usize,
    pub window: Window,
    pub n_mels: usize,
    pub floor_db: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        let stft = StftConfig::default();
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            frame_length: stft.frame_length,
            hop: stft.hop,
            window: stft.window,
            n_mels: DEFAULT_N_MELS,
            floor_db: DEFAULT_FLOOR_DB,
        }
    }
}

impl DspConfig {
    pub fn extractor(&self) -> Result<FeatureExtractor> {
        let stft = StftConfig {
            frame_length: self.frame_length,
            hop: self.hop,
            window: self.window,
        };
        FeatureExtractor::new(stft, self.n_mels, self.sample_rate, self.floor_db)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Summed-saliency threshold for frame retention; defaults to
    /// `0.1875 * n_mels` when absent.
    pub frame_threshold: Option<f64>,
    /// Number of evenly spaced deletion thresholds over `[0, 1]`.
    pub deletion_thresholds: usize,
    pub topk: Vec<usize>,
    /// Cap on test utterances per condition; `0` uses all of them.
    pub max_test_utterances: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            frame_threshold: None,
            deletion_thresholds: 21,
            topk: vec![1, 5, 10],
            max_test_utterances: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub dsp: DspConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

fn config_error(e: toml::de::Error) -> Error {
    Error::Config(e.to_string().split_whitespace().collect::<Vec<_>>().join(" "))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(config_error)?;
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths become relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.results, &mut cfg.paths.audio_root] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Sets the global seed and the model and training seeds derived from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = derive_seed(seed, 1);
        self.train.seed = derive_seed(seed, 2);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.n_mels != self.dsp.n_mels {
            return Err(Error::Config(format!(
                "model.n_mels ({}) must equal dsp.n_mels ({})",
                self.model.n_mels, self.dsp.n_mels
            )));
        }
        if self.model.n_speakers != self.corpus.n_speakers {
            return Err(Error::Config(format!(
                "model.n_speakers ({}) must equal corpus.n_speakers ({})",
                self.model.n_speakers, self.corpus.n_speakers
            )));
        }
        if let Some(t) = self.analysis.frame_threshold {
            if !(t > 0.0) {
                return Err(Error::Config(format!("analysis.frame_threshold must be > 0, got {t}")));
            }
        }
        if self.analysis.deletion_thresholds < 2 {
            return Err(Error::Config("analysis.deletion_thresholds must be >= 2".into()));
        }
        if self.analysis.topk.iter().any(|&k| k == 0 || k > self.model.n_speakers) {
            return Err(Error::Config(format!("analysis.topk entries must be in 1..={}", self.model.n_speakers)));
        }
        self.dsp.extractor().map_err(|e| Error::Config(format!("dsp: {e}")))?;
        Ok(())
    }

    pub fn frame_threshold(&self) -> f64 {
        self.analysis
            .frame_threshold
            .unwrap_or_else(|| crate::analysis::default_frame_threshold(self.dsp.n_mels))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.results.join("corpus").join("manifest.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.results.join("checkpoints")
    }
}
