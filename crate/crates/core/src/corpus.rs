//! Synthetic speaker and interference corpus, scenario builders, WAV
//! ingestion and experiment manifests.
//!
//! Synthetic speech is a harmonic source following a per-syllable F0 glide,
//! shaped by a speaker's formant resonances and spectral tilt, with
//! per-syllable formant perturbations standing in for phonetic content.
//! Every generated clip is normalised to [`TARGET_RMS`], so an interference
//! gain `alpha` sets the mixture SNR to `-20 log10(alpha)` dB.
//!
//! # Manifest format
//!
//! Line-delimited JSON. The first line is a [`ManifestHeader`], every
//! following line a [`ManifestRecord`], sorted by `key`. Synthetic sources
//! are generator specs (`profile`, `seed`, `duration`), so a corpus never
//! has to be written to disk as audio.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::{FrameLabel, SegmentLabels};
use crate::augment;
use crate::dsp::{StftConfig, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::wav;

/// RMS every synthetic clip is normalised to (-20 dBFS).
pub const TARGET_RMS: f64 = 0.1;
pub const MANIFEST_FORMAT: &str = "spkcam-manifest/1";
/// Offset of interference-speaker profile ids; target ids stay below it.
pub const INTERFERER_ID_BASE: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterferenceKind {
    Noise,
    Speech,
    Music,
}

impl InterferenceKind {
    pub const ALL: [InterferenceKind; 3] = [InterferenceKind::Noise, InterferenceKind::Speech, InterferenceKind::Music];
}

impl fmt::Display for InterferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterferenceKind::Noise => "noise",
            InterferenceKind::Speech => "speech",
            InterferenceKind::Music => "music",
        })
    }
}

impl FromStr for InterferenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(InterferenceKind::Noise),
            "speech" => Ok(InterferenceKind::Speech),
            "music" => Ok(InterferenceKind::Music),
            other => Err(Error::Config(format!(
                "interference: unknown type {other:?} (expected noise, speech or music)"
            ))),
        }
    }
}

/// SplitMix64 finaliser; combines seeds into well-mixed streams.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeakerProfile {
    pub id: u32,
    /// F0 range in Hz; syllable glides stay inside it.
    pub f0_range: (f64, f64),
    /// Formant centre frequencies in Hz, strictly increasing.
    pub formants: Vec<f64>,
    /// Formant bandwidths in Hz.
    pub bandwidths: Vec<f64>,
    /// Harmonic amplitude envelope slope in dB per octave (negative).
    pub tilt_db_per_octave: f64,
    /// Relative depth of random F0 perturbation.
    pub jitter: f64,
    pub vibrato_hz: f64,
    /// Aspiration noise level relative to the voiced part.
    pub breathiness: f64,
    pub seed: u64,
}

impl SyntheticSpeakerProfile {
    pub fn random(id: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id as u64));
        let f0 = rng.gen_range(90.0..240.0);
        let spread = rng.gen_range(0.10..0.25);
        let formants = vec![
            rng.gen_range(350.0..800.0),
            rng.gen_range(1000.0..2100.0),
            rng.gen_range(2300.0..3100.0),
            rng.gen_range(3400.0..4300.0),
        ];
        let bandwidths = vec![
            rng.gen_range(60.0..120.0),
            rng.gen_range(80.0..160.0),
            rng.gen_range(120.0..220.0),
            rng.gen_range(150.0..300.0),
        ];
        Self {
            id,
            f0_range: (f0 * (1.0 - spread), f0 * (1.0 + spread)),
            formants,
            bandwidths,
            tilt_db_per_octave: rng.gen_range(-12.0..-5.0),
            jitter: rng.gen_range(0.005..0.02),
            vibrato_hz: rng.gen_range(3.0..6.5),
            breathiness: rng.gen_range(0.02..0.10),
            seed: derive_seed(seed, 0xC0FFEE ^ id as u64),
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if self.formants.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!("profile {}: formants must increase", self.id)));
        }
        if let Some(f) = self.formants.iter().find(|&&f| f <= 0.0 || f >= nyquist) {
            return Err(Error::InvalidArgument(format!(
                "profile {}: formant {f} Hz outside (0, {nyquist}) Hz",
                self.id
            )));
        }
        if self.bandwidths.len() != self.formants.len() {
            return Err(Error::InvalidArgument(format!("profile {}: one bandwidth per formant", self.id)));
        }
        if !(self.f0_range.0 > 0.0 && self.f0_range.0 <= self.f0_range.1 && self.f0_range.1 < nyquist) {
            return Err(Error::InvalidArgument(format!("profile {}: bad F0 range", self.id)));
        }
        Ok(())
    }

    fn envelope_gain(&self, f: f64, formants: &[f64]) -> f64 {
        let weights = [1.0, 0.8, 0.45, 0.3];
        let resonance: f64 = formants
            .iter()
            .zip(&self.bandwidths)
            .enumerate()
            .map(|(i, (&fc, &bw))| {
                let x = (f - fc) / (bw / 2.0);
                weights.get(i).copied().unwrap_or(0.3) / (1.0 + x * x)
            })
            .sum();
        let tilt = 10f64.powf(self.tilt_db_per_octave * (f / 100.0).max(1e-3).log2() / 20.0);
        (resonance + 0.02) * tilt.min(1.0)
    }
}

fn normalize_rms(mut samples: Vec<f64>) -> Vec<f64> {
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / samples.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let mut g = TARGET_RMS / rms;
        let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if peak * g > 0.99 {
            g = 0.99 / peak;
        }
        samples.iter_mut().for_each(|s| *s *= g);
    }
    samples
}

/// Harmonic speech-like utterance; a pure function of `(profile, duration, seed)`.
pub fn synth_utterance(profile: &SyntheticSpeakerProfile, duration: f64, seed: u64) -> Result<Waveform> {
    synth_utterance_at(profile, duration, seed, DEFAULT_SAMPLE_RATE)
}

pub fn synth_utterance_at(profile: &SyntheticSpeakerProfile, duration: f64, seed: u64, sample_rate: u32) -> Result<Waveform> {
    if !(duration >= 0.5) {
        return Err(Error::InvalidArgument(format!("utterance duration {duration} s < 0.5 s")));
    }
    profile.validate(sample_rate)?;
    let sr = sample_rate as f64;
    let n = (duration * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, seed));
    let (f0_lo, f0_hi) = profile.f0_range;
    let max_harmonic_hz = (0.45 * sr).min(7000.0);

    // Syllable plan: (start, len, f0 start, f0 end, formants, level).
    struct Syllable {
        start: usize,
        len: usize,
        f0: (f64, f64),
        formants: Vec<f64>,
        level: f64,
    }
    let mut syllables = Vec::new();
    let mut t = (rng.gen_range(0.0..0.04) * sr) as usize;
    while t < n {
        let len = (rng.gen_range(0.12..0.30) * sr) as usize;
        let gap = (rng.gen_range(0.01..0.05) * sr) as usize;
        let mut formants: Vec<f64> = profile
            .formants
            .iter()
            .map(|f| f * (1.0 + rng.gen_range(-0.12..0.12)))
            .collect();
        for i in 1..formants.len() {
            formants[i] = formants[i].max(formants[i - 1] + 100.0);
        }
        syllables.push(Syllable {
            start: t,
            len,
            f0: (rng.gen_range(f0_lo..=f0_hi), rng.gen_range(f0_lo..=f0_hi)),
            formants,
            level: rng.gen_range(0.6..1.0),
        });
        t += len + gap;
    }

    let mut out = vec![0.0; n];
    let block = 80;
    let mut phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let vib_phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut jitter_state = 0.0;
    let mut amps: Vec<f64> = Vec::new();
    let mut prev_noise = 0.0;
    for syl in &syllables {
        let end = (syl.start + syl.len).min(n);
        let mut s = syl.start;
        while s < end {
            let b_end = (s + block).min(end);
            let pos = (s - syl.start) as f64 / syl.len as f64;
            jitter_state = 0.9 * jitter_state + 0.1 * rng.sample::<f64, _>(StandardNormal);
            let vib = 0.01 * (2.0 * PI * profile.vibrato_hz * s as f64 / sr + vib_phase).sin();
            let f0 = (syl.f0.0 + (syl.f0.1 - syl.f0.0) * pos) * (1.0 + vib + profile.jitter * jitter_state);
            let k_max = ((max_harmonic_hz / f0) as usize).max(1);
            amps.clear();
            amps.extend((1..=k_max).map(|k| profile.envelope_gain(k as f64 * f0, &syl.formants)));
            let dphi = 2.0 * PI * f0 / sr;
            for (i, o) in out[s..b_end].iter_mut().enumerate() {
                let p = ((s + i - syl.start) as f64 / syl.len as f64).clamp(0.0, 1.0);
                // Raised-cosine attack over the first 20%, decay over the last 30%.
                let env = if p < 0.2 {
                    0.5 - 0.5 * (PI * p / 0.2).cos()
                } else if p > 0.7 {
                    0.5 + 0.5 * (PI * (p - 0.7) / 0.3).cos()
                } else {
                    1.0
                } * syl.level;
                phase += dphi;
                if phase > 2.0 * PI {
                    phase -= 2.0 * PI;
                }
                let (s1, c1) = phase.sin_cos();
                let (mut prev, mut cur) = (0.0, s1);
                let mut acc = 0.0;
                for &a in amps.iter() {
                    acc += a * cur;
                    let next = 2.0 * c1 * cur - prev;
                    prev = cur;
                    cur = next;
                }
                let white: f64 = rng.sample(StandardNormal);
                let aspiration = white - prev_noise;
                prev_noise = white;
                *o = env * (acc + profile.breathiness * aspiration);
            }
            s = b_end;
        }
    }
    Waveform::new(normalize_rms(out), sample_rate)
}

fn synth_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tilt = rng.gen_range(-0.5..0.5);
    let am_hz = rng.gen_range(0.5..4.0);
    let am_depth = rng.gen_range(0.0..0.3);
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let mut prev = 0.0;
    (0..n)
        .map(|i| {
            let w: f64 = rng.sample(StandardNormal);
            let y = w - tilt * prev;
            prev = w;
            let am = 1.0 + am_depth * (2.0 * PI * am_hz * i as f64 / DEFAULT_SAMPLE_RATE as f64 + am_phase).sin();
            y * am
        })
        .collect()
}

fn synth_music(n: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const PENTATONIC: [i32; 5] = [0, 2, 4, 7, 9];
    let sr = sample_rate as f64;
    let mut out = vec![0.0; n];
    let voices = rng.gen_range(2..=3);
    let key = rng.gen_range(0..12);
    for v in 0..voices {
        let base_midi = 40 + 14 * v + key;
        let n_harm = rng.gen_range(5..=12);
        let rolloff = rng.gen_range(0.7..1.5);
        let decay = rng.gen_range(0.1..0.8);
        let level = if v == 0 { 1.0 } else { rng.gen_range(0.4..0.9) };
        let mut t = 0usize;
        while t < n {
            let dur = (rng.gen_range(0.12..0.45) * sr) as usize;
            let degree = rng.gen_range(0..10);
            let midi = base_midi + 12 * (degree / 5) + PENTATONIC[degree as usize % 5];
            let f0 = 440.0 * 2f64.powf((midi - 69) as f64 / 12.0);
            let end = (t + dur).min(n);
            for (i, o) in out[t..end].iter_mut().enumerate() {
                let time = i as f64 / sr;
                let env = (time / 0.01).min(1.0) * (-time / decay).exp();
                let mut acc = 0.0;
                for k in 1..=n_harm {
                    let f = f0 * k as f64;
                    if f >= 0.45 * sr {
                        break;
                    }
                    acc += (2.0 * PI * f * time).sin() / (k as f64).powf(rolloff);
                }
                *o += level * env * acc;
            }
            t = end;
        }
    }
    out
}

/// Interference clip of the given kind. Speech interference draws its
/// talker from `speech_profiles`, which must not contain target speakers.
pub fn synth_interference(
    kind: InterferenceKind,
    duration: f64,
    seed: u64,
    speech_profiles: &[SyntheticSpeakerProfile],
) -> Result<Waveform> {
    let sr = DEFAULT_SAMPLE_RATE;
    let n = (duration * sr as f64).round() as usize;
    if n == 0 {
        return Err(Error::InvalidArgument("interference duration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, kind as u64 + 17));
    let samples = match kind {
        InterferenceKind::Noise => synth_noise(n, &mut rng),
        InterferenceKind::Music => synth_music(n, sr, &mut rng),
        InterferenceKind::Speech => {
            if speech_profiles.is_empty() {
                return Err(Error::InvalidArgument("no interference speaker profiles".into()));
            }
            let profile = &speech_profiles[rng.gen_range(0..speech_profiles.len())];
            return synth_utterance(profile, duration.max(0.5), rng.gen()).map(|w| w.truncated(n));
        }
    };
    Waveform::new(normalize_rms(samples), sr)
}

/// Target followed by interference, with per-frame ownership labels on the
/// STFT frame grid. A frame straddling the splice belongs to whichever part
/// owns the majority of its samples (ties go to the target).
pub fn build_concat(target: &Waveform, interference: &Waveform, stft: &StftConfig) -> Result<(Waveform, SegmentLabels)> {
    if target.sample_rate() != interference.sample_rate() {
        return Err(Error::ConfigMismatch {
            field: "sample_rate",
            expected: target.sample_rate().to_string(),
            found: interference.sample_rate().to_string(),
        });
    }
    let boundary = target.len();
    let mut samples = target.samples().to_vec();
    samples.extend_from_slice(interference.samples());
    let frames = stft.frame_count(samples.len());
    let labels = (0..frames)
        .map(|t| {
            let start = t * stft.hop;
            let owned_by_target = boundary.saturating_sub(start).min(stft.frame_length);
            if 2 * owned_by_target >= stft.frame_length {
                FrameLabel::TargetSpeech
            } else {
                FrameLabel::Interference
            }
        })
        .collect();
    Ok((Waveform::new(samples, target.sample_rate())?, SegmentLabels::new(labels)))
}

/// One mixture per requested SNR. Inside `window` the interference (tiled or
/// truncated to the window length) is scaled so that the windowed target to
/// added-interference energy ratio equals the request; outside `window` the
/// target is copied unchanged.
pub fn build_ramp(
    target: &Waveform,
    interference: &Waveform,
    snr_db: &[f64],
    window: std::ops::Range<usize>,
) -> Result<Vec<Waveform>> {
    if window.start >= window.end || window.end > target.len() {
        return Err(Error::InvalidArgument(format!(
            "ramp window {window:?} outside target of {} samples",
            target.len()
        )));
    }
    let segment = target.slice(window.start, window.len());
    let noise = augment::fit_length(interference, window.len(), 0)?;
    let (e_t, e_n) = (segment.energy(), noise.energy());
    if e_t <= 0.0 || e_n <= 0.0 {
        return Err(Error::InvalidArgument("zero-energy ramp window".into()));
    }
    snr_db
        .iter()
        .map(|&snr| {
            let gain = (e_t / (e_n * 10f64.powf(snr / 10.0))).sqrt();
            let mut samples = target.samples().to_vec();
            for (s, n) in samples[window.clone()].iter_mut().zip(noise.samples()) {
                *s += gain * n;
            }
            Waveform::new(samples, target.sample_rate())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Clean,
    Concat,
    Overlap,
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Target,
    Interference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Source {
    /// Synthetic utterance of profile `profile`.
    Synth { profile: u32, seed: u64, duration: f64 },
    /// Synthetic interference clip.
    Interference {
        interference: InterferenceKind,
        seed: u64,
        duration: f64,
    },
    /// PCM-16 mono file, relative to the manifest's audio root.
    Wav { path: PathBuf },
    /// Built from two other records of the manifest.
    Mixture { target: String, interference: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: FrameLabel,
    /// Sample range `[start, end)`.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub key: String,
    pub role: Role,
    pub source: Source,
    pub speaker: Option<u32>,
    pub split: Split,
    pub scenario: Scenario,
    pub interference: Option<InterferenceKind>,
    /// Interference gain for overlap mixtures.
    pub alpha: Option<f64>,
    /// Present iff `scenario` is `concat`.
    pub segments: Option<Vec<Segment>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub seed: u64,
    pub sample_rate: u32,
    /// Human-readable statement of how overlap mixtures were drawn.
    pub mixing_policy: String,
    /// Speaker names by id (index), for ingested corpora.
    pub speakers: Vec<String>,
    /// Every synthetic profile referenced by the records.
    pub profiles: Vec<SyntheticSpeakerProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentManifest {
    pub header: ManifestHeader,
    records: Vec<ManifestRecord>,
    index: HashMap<String, usize>,
}

impl ExperimentManifest {
    /// Sorts records by key and checks the manifest invariants.
    pub fn new(header: ManifestHeader, mut records: Vec<ManifestRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.key.cmp(&b.key));
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.key.clone(), i).is_some() {
                return Err(Error::Manifest(format!("duplicate key {}", r.key)));
            }
            if r.segments.is_some() != (r.scenario == Scenario::Concat) {
                return Err(Error::Manifest(format!("{}: segments must be present iff scenario is concat", r.key)));
            }
        }
        let m = Self { header, records, index };
        m.check_closed_set()?;
        Ok(m)
    }

    fn check_closed_set(&self) -> Result<()> {
        let train: std::collections::HashSet<u32> = self
            .targets(Split::Train)
            .filter_map(|r| r.speaker)
            .collect();
        if let Some(r) = self
            .records
            .iter()
            .filter(|r| r.role == Role::Target && r.split == Split::Test)
            .find(|r| r.speaker.is_some_and(|s| !train.contains(&s)))
        {
            return Err(Error::Manifest(format!(
                "{}: test speaker {:?} has no training utterances",
                r.key, r.speaker
            )));
        }
        Ok(())
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn get(&self, key: &str) -> Option<&ManifestRecord> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    /// Clean target utterances of a split.
    pub fn targets(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records
            .iter()
            .filter(move |r| r.role == Role::Target && r.scenario == Scenario::Clean && r.split == split)
    }

    pub fn interference_clips(&self, kind: InterferenceKind, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records
            .iter()
            .filter(move |r| r.role == Role::Interference && r.interference == Some(kind) && r.split == split)
    }

    pub fn scenario(&self, scenario: Scenario, kind: InterferenceKind) -> impl Iterator<Item = &ManifestRecord> {
        self.records
            .iter()
            .filter(move |r| r.scenario == scenario && r.interference == Some(kind))
    }

    pub fn n_speakers(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.role == Role::Target)
            .filter_map(|r| r.speaker)
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    fn profile(&self, id: u32) -> Result<&SyntheticSpeakerProfile> {
        self.header
            .profiles
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::Manifest(format!("unknown profile {id}")))
    }

    fn interferer_profiles(&self) -> Vec<SyntheticSpeakerProfile> {
        self.header
            .profiles
            .iter()
            .filter(|p| p.id >= INTERFERER_ID_BASE)
            .cloned()
            .collect()
    }

    /// Materialises a record's audio. `audio_root` resolves WAV paths.
    pub fn waveform(&self, key: &str, audio_root: &Path) -> Result<Waveform> {
        let r = self.get(key).ok_or_else(|| Error::Manifest(format!("unknown key {key}")))?;
        match &r.source {
            Source::Synth { profile, seed, duration } => {
                synth_utterance_at(self.profile(*profile)?, *duration, *seed, self.header.sample_rate)
            }
            Source::Interference {
                interference,
                seed,
                duration,
            } => synth_interference(*interference, *duration, *seed, &self.interferer_profiles()),
            Source::Wav { path } => wav::read_wav(audio_root.join(path)),
            Source::Mixture { target, interference } => {
                let t = self.waveform(target, audio_root)?;
                let n = self.waveform(interference, audio_root)?;
                match r.scenario {
                    Scenario::Concat => {
                        let seg = r.segments.as_ref().expect("validated");
                        let n_len = seg.iter().find(|s| s.label == FrameLabel::Interference).map_or(0, |s| s.end - s.start);
                        let n = augment::fit_length(&n, n_len, 0)?;
                        let mut samples = t.into_samples();
                        samples.extend_from_slice(n.samples());
                        Waveform::new(samples, self.header.sample_rate)
                    }
                    _ => augment::mix(&t, &n, r.alpha.unwrap_or(1.0)),
                }
            }
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines.next().ok_or_else(|| Error::Manifest("empty manifest".into()))??;
        let header: ManifestHeader = serde_json::from_str(&header_line)?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::Manifest(format!("unsupported format {:?}", header.format)));
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Self::new(header, records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

/// Deterministic split: within each group, items are ranked by a CRC-32 of
/// their key, and the lowest-ranked ones go to test. Test counts follow the
/// running total so the overall ratio stays within one item of
/// `test_fraction`; every group keeps at least one training item.
pub fn hash_split<'a>(items: impl IntoIterator<Item = (&'a str, &'a str)>, test_fraction: f64) -> BTreeMap<String, Split> {
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (group, key) in items {
        groups.entry(group).or_default().push(key);
    }
    let mut out = BTreeMap::new();
    let mut seen = 0usize;
    let mut assigned_test = 0usize;
    for keys in groups.values_mut() {
        keys.sort_by_key(|k| (crc32fast::hash(k.as_bytes()), *k));
        seen += keys.len();
        let quota = (test_fraction * seen as f64).round() as usize;
        let n_test = quota.saturating_sub(assigned_test).min(keys.len() - 1);
        assigned_test += n_test;
        for (i, k) in keys.iter().enumerate() {
            out.insert(k.to_string(), if i < n_test { Split::Test } else { Split::Train });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_secs: f64,
    pub n_interference_speakers: usize,
    pub noise_clips: usize,
    pub speech_clips: usize,
    pub music_clips: usize,
    pub interference_secs: f64,
    /// Length of the interference part of concatenated test utterances.
    pub concat_interference_secs: f64,
    pub test_fraction: f64,
    /// Range of the interference gain drawn for overlap test mixtures.
    pub alpha_range: (f64, f64),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 16,
            utterances_per_speaker: 40,
            utterance_secs: 2.0,
            n_interference_speakers: 8,
            noise_clips: 64,
            speech_clips: 64,
            music_clips: 64,
            interference_secs: 2.0,
            concat_interference_secs: 1.0,
            test_fraction: 0.2,
            alpha_range: (0.1, 2.0),
        }
    }
}

fn utterance_key(speaker: usize, utt: usize) -> String {
    format!("spk{speaker:03}/utt{utt:03}")
}

/// Builds the synthetic corpus manifest: clean target utterances, train/test
/// interference pools, and for every test utterance and interference type one
/// overlap mixture and one concatenation.
pub fn build_synthetic_manifest(cfg: &CorpusConfig, seed: u64) -> Result<ExperimentManifest> {
    if cfg.n_speakers < 2 {
        return Err(Error::Config("corpus.n_speakers must be >= 2".into()));
    }
    if !(0.0 < cfg.alpha_range.0 && cfg.alpha_range.0 <= cfg.alpha_range.1) {
        return Err(Error::Config("corpus.alpha_range must satisfy 0 < min <= max".into()));
    }
    let sr = DEFAULT_SAMPLE_RATE;
    let mut profiles: Vec<SyntheticSpeakerProfile> = (0..cfg.n_speakers as u32)
        .map(|id| SyntheticSpeakerProfile::random(id, seed))
        .collect();
    profiles.extend(
        (0..cfg.n_interference_speakers as u32).map(|j| SyntheticSpeakerProfile::random(INTERFERER_ID_BASE + j, seed)),
    );

    let mut records = Vec::new();
    let target_keys: Vec<(String, String)> = (0..cfg.n_speakers)
        .flat_map(|s| (0..cfg.utterances_per_speaker).map(move |u| (format!("spk{s:03}"), utterance_key(s, u))))
        .collect();
    let target_split = hash_split(target_keys.iter().map(|(g, k)| (g.as_str(), k.as_str())), cfg.test_fraction);
    for s in 0..cfg.n_speakers {
        for u in 0..cfg.utterances_per_speaker {
            let key = utterance_key(s, u);
            records.push(ManifestRecord {
                split: target_split[&key],
                key,
                role: Role::Target,
                source: Source::Synth {
                    profile: s as u32,
                    seed: derive_seed(seed, (s * 100_003 + u) as u64),
                    duration: cfg.utterance_secs,
                },
                speaker: Some(s as u32),
                scenario: Scenario::Clean,
                interference: None,
                alpha: None,
                segments: None,
            });
        }
    }

    let mut pools: BTreeMap<InterferenceKind, (Vec<String>, Vec<String>)> = BTreeMap::new();
    for kind in InterferenceKind::ALL {
        let count = match kind {
            InterferenceKind::Noise => cfg.noise_clips,
            InterferenceKind::Speech => cfg.speech_clips,
            InterferenceKind::Music => cfg.music_clips,
        };
        let keys: Vec<String> = (0..count).map(|i| format!("{kind}/clip{i:03}")).collect();
        let group = kind.to_string();
        let split = hash_split(keys.iter().map(|k| (group.as_str(), k.as_str())), cfg.test_fraction);
        let pool = pools.entry(kind).or_default();
        for (i, key) in keys.into_iter().enumerate() {
            let sp = split[&key];
            if sp == Split::Train {
                pool.0.push(key.clone());
            } else {
                pool.1.push(key.clone());
            }
            records.push(ManifestRecord {
                key,
                role: Role::Interference,
                source: Source::Interference {
                    interference: kind,
                    seed: derive_seed(seed ^ 0x1F7E_5EED, (kind as u64) << 32 | i as u64),
                    duration: cfg.interference_secs,
                },
                speaker: None,
                split: sp,
                scenario: Scenario::Clean,
                interference: Some(kind),
                alpha: None,
                segments: None,
            });
        }
    }

    let test_targets: Vec<(String, u32)> = records
        .iter()
        .filter(|r| r.role == Role::Target && r.split == Split::Test)
        .map(|r| (r.key.clone(), r.speaker.expect("targets have speakers")))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5CE7A110));
    let target_len = (cfg.utterance_secs * sr as f64).round() as usize;
    let concat_len = (cfg.concat_interference_secs * sr as f64).round() as usize;
    for kind in InterferenceKind::ALL {
        let test_pool = &pools[&kind].1;
        if test_pool.is_empty() {
            return Err(Error::Config(format!("no test clips for {kind} interference")));
        }
        for (key, speaker) in &test_targets {
            let overlap_clip = &test_pool[rng.gen_range(0..test_pool.len())];
            let concat_clip = &test_pool[rng.gen_range(0..test_pool.len())];
            let alpha = rng.gen_range(cfg.alpha_range.0..=cfg.alpha_range.1);
            records.push(ManifestRecord {
                key: format!("overlap/{kind}/{key}"),
                role: Role::Target,
                source: Source::Mixture {
                    target: key.clone(),
                    interference: overlap_clip.clone(),
                },
                speaker: Some(*speaker),
                split: Split::Test,
                scenario: Scenario::Overlap,
                interference: Some(kind),
                alpha: Some(alpha),
                segments: None,
            });
            records.push(ManifestRecord {
                key: format!("concat/{kind}/{key}"),
                role: Role::Target,
                source: Source::Mixture {
                    target: key.clone(),
                    interference: concat_clip.clone(),
                },
                speaker: Some(*speaker),
                split: Split::Test,
                scenario: Scenario::Concat,
                interference: Some(kind),
                alpha: None,
                segments: Some(vec![
                    Segment {
                        label: FrameLabel::TargetSpeech,
                        start: 0,
                        end: target_len,
                    },
                    Segment {
                        label: FrameLabel::Interference,
                        start: target_len,
                        end: target_len + concat_len,
                    },
                ]),
            });
        }
    }

    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        seed,
        sample_rate: sr,
        mixing_policy: format!(
            "clips normalised to {TARGET_RMS} RMS; overlap mixtures x + alpha * n with alpha ~ Uniform({}, {}), \
             interference tiled or truncated to the target length; concat interference truncated to {} s",
            cfg.alpha_range.0, cfg.alpha_range.1, cfg.concat_interference_secs
        ),
        speakers: (0..cfg.n_speakers).map(|s| format!("spk{s:03}")).collect(),
        profiles,
    };
    ExperimentManifest::new(header, records)
}

/// How ingested file paths map to speaker labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelRule {
    /// Name of the directory containing the file.
    ParentDir,
    /// File stem up to the first occurrence of the separator.
    StemPrefix(char),
}

impl LabelRule {
    fn label(&self, rel: &Path) -> Option<String> {
        match self {
            LabelRule::ParentDir => rel.parent()?.file_name()?.to_str().map(str::to_string),
            LabelRule::StemPrefix(sep) => {
                let stem = rel.file_stem()?.to_str()?;
                stem.split_once(*sep).map(|(p, _)| p.to_string())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub manifest: ExperimentManifest,
    /// Files that could not be used, with the reason.
    pub rejects: Vec<(PathBuf, String)>,
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_wavs(&p, out)?;
        } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Scans `dir` recursively for `.wav` files and builds a clean-speech
/// manifest with a hash-stable 80/20 train/test split.
pub fn ingest_wav(dir: impl AsRef<Path>, rule: &LabelRule) -> Result<IngestReport> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    collect_wavs(dir, &mut files)?;
    let mut rejects = Vec::new();
    let mut usable: Vec<(String, PathBuf, u32)> = Vec::new();
    let mut sample_rate = None;
    for path in files {
        let rel = path.strip_prefix(dir).expect("under dir").to_path_buf();
        let Some(label) = rule.label(&rel) else {
            rejects.push((rel, "labeling rule found no speaker".into()));
            continue;
        };
        match wav::read_wav(&path) {
            Ok(w) if *sample_rate.get_or_insert(w.sample_rate()) != w.sample_rate() => {
                rejects.push((rel, format!("sample_rate {} differs from {}", w.sample_rate(), sample_rate.unwrap())));
            }
            Ok(w) => usable.push((label, rel, w.sample_rate())),
            Err(e) => rejects.push((rel, e.to_string())),
        }
    }
    if usable.is_empty() {
        return Err(Error::NoUsableAudio(dir.to_path_buf()));
    }
    let mut speakers: Vec<String> = usable.iter().map(|u| u.0.clone()).collect();
    speakers.sort();
    speakers.dedup();
    let keys: Vec<(String, String)> = usable
        .iter()
        .map(|(label, rel, _)| (label.clone(), rel.to_string_lossy().replace('\\', "/")))
        .collect();
    let split = hash_split(keys.iter().map(|(g, k)| (g.as_str(), k.as_str())), 0.2);
    let records = usable
        .iter()
        .zip(&keys)
        .map(|((label, rel, _), (_, key))| ManifestRecord {
            key: key.clone(),
            role: Role::Target,
            source: Source::Wav { path: rel.clone() },
            speaker: Some(speakers.binary_search(label).expect("label collected") as u32),
            split: split[key],
            scenario: Scenario::Clean,
            interference: None,
            alpha: None,
            segments: None,
        })
        .collect();
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        seed: 0,
        sample_rate: sample_rate.expect("at least one usable file"),
        mixing_policy: "ingested clean speech; no mixtures".into(),
        speakers,
        profiles: Vec::new(),
    };
    Ok(IngestReport {
        manifest: ExperimentManifest::new(header, records)?,
        rejects,
    })
}
