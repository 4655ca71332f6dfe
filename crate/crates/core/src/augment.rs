//! Interference mixing, the clean/augmented training objectives, and the
//! training loop that produces Base, Vanilla DA and Act DA checkpoints.

use std::cell::Cell;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NamedTensors, Sgd, Tape, TensorId};
use crate::checkpoint::{Checkpoint, TrainingMetadata};
use crate::corpus::{derive_seed, ExperimentManifest, InterferenceKind, Split};
use crate::dsp::{FbankMatrix, FeatureExtractor, Waveform};
use crate::error::{Error, Result};
use crate::net::{ForwardPass, Mode, ModelConfig, SpeakerNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaMode {
    /// Clean speech only.
    Base,
    /// Cross-entropy on clean and interference-mixed copies.
    VanillaDa,
    /// Vanilla DA plus the squared distance between clean and mixed embeddings.
    ActDa,
}

impl DaMode {
    pub const ALL: [DaMode; 3] = [DaMode::Base, DaMode::VanillaDa, DaMode::ActDa];

    pub fn uses_interference(self) -> bool {
        self != DaMode::Base
    }
}

impl fmt::Display for DaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DaMode::Base => "base",
            DaMode::VanillaDa => "vanilla_da",
            DaMode::ActDa => "act_da",
        })
    }
}

impl FromStr for DaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(DaMode::Base),
            "vanilla_da" => Ok(DaMode::VanillaDa),
            "act_da" => Ok(DaMode::ActDa),
            other => Err(Error::Config(format!(
                "mode: unknown value {other:?} (expected base, vanilla_da or act_da)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixSpec {
    pub interference: InterferenceKind,
    pub alpha_range: (f64, f64),
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            interference: InterferenceKind::Noise,
            alpha_range: (0.1, 2.0),
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.alpha_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("train.mix.alpha_range: need 0 < min <= max, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: DaMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Training crop length in frames; each step sees a random crop of every
    /// utterance. `0` trains on whole utterances.
    pub crop_frames: usize,
    /// Shuffling, cropping and mixing seed; run configs derive it from the
    /// global seed.
    #[serde(skip)]
    pub seed: u64,
    pub mix: MixSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: DaMode::Base,
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            crop_frames: 100,
            seed: 0,
            mix: MixSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must be in [0, 1), got {}", self.momentum)));
        }
        self.mix.validate()
    }

    pub fn interference(&self) -> Option<InterferenceKind> {
        self.mode.uses_interference().then_some(self.mix.interference)
    }
}

/// `n` tiled (or truncated) to `len` samples, reading from `offset` onwards
/// with wrap-around.
pub fn fit_length(n: &Waveform, len: usize, offset: usize) -> Result<Waveform> {
    if n.is_empty() {
        return Err(Error::InvalidArgument("empty interference clip".into()));
    }
    let s = n.samples();
    let samples = (0..len).map(|i| s[(offset + i) % s.len()]).collect();
    Waveform::new(samples, n.sample_rate())
}

/// `x + alpha * n`, with `n` tiled or truncated to the length of `x`.
pub fn mix(x: &Waveform, n: &Waveform, alpha: f64) -> Result<Waveform> {
    mix_at(x, n, alpha, 0)
}

fn mix_at(x: &Waveform, n: &Waveform, alpha: f64, offset: usize) -> Result<Waveform> {
    if x.sample_rate() != n.sample_rate() {
        return Err(Error::ConfigMismatch {
            field: "sample_rate",
            expected: x.sample_rate().to_string(),
            found: n.sample_rate().to_string(),
        });
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("mixing gain must be >= 0, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(x.clone());
    }
    let n = fit_length(n, x.len(), offset)?;
    let samples = x.samples().iter().zip(n.samples()).map(|(a, b)| a + alpha * b).collect();
    Waveform::new(samples, x.sample_rate())
}

pub fn sample_alpha(spec: &MixSpec, rng: &mut impl Rng) -> f64 {
    rng.gen_range(spec.alpha_range.0..=spec.alpha_range.1)
}

/// Loss terms of one step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub ce_clean: f64,
    pub ce_augmented: Option<f64>,
    pub embedding_distance: Option<f64>,
}

/// Tape ids of a built objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub pass: ForwardPass,
    pub total: TensorId,
    pub ce_clean: TensorId,
    pub ce_augmented: Option<TensorId>,
    pub embedding_distance: Option<TensorId>,
}

impl Objective {
    pub fn terms(&self, tape: &Tape) -> LossTerms {
        LossTerms {
            total: tape.value(self.total).item(),
            ce_clean: tape.value(self.ce_clean).item(),
            ce_augmented: self.ce_augmented.map(|id| tape.value(id).item()),
            embedding_distance: self.embedding_distance.map(|id| tape.value(id).item()),
        }
    }

    /// Gradient of `output` with respect to every model parameter, by name.
    pub fn param_gradients(&self, tape: &Tape, output: TensorId) -> Result<NamedTensors> {
        let ids = self.pass.param_ids();
        let mut grads = tape.backward(output, &ids)?;
        Ok(self
            .pass
            .params
            .iter()
            .map(|(name, id)| (name.clone(), grads.remove(*id).expect("requested gradient")))
            .collect())
    }
}

/// Builds the training objective for `mode` on one joint forward pass over
/// `[clean; augmented]`, so batch-norm statistics cover both halves.
pub fn build_objective(
    model: &SpeakerNet,
    tape: &mut Tape,
    mode: DaMode,
    clean: &[&FbankMatrix],
    augmented: &[&FbankMatrix],
    labels: &[usize],
) -> Result<Objective> {
    if clean.len() != labels.len() {
        return Err(Error::shape("objective labels", clean.len(), labels.len()));
    }
    let n_classes = model.config().n_speakers;
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange { label, n_classes });
    }
    if mode == DaMode::Base {
        let pass = model.forward(tape, model.input_tensor(clean)?, Mode::Train)?;
        let ce = tape.softmax_cross_entropy(pass.logits, labels)?;
        return Ok(Objective {
            pass,
            total: ce,
            ce_clean: ce,
            ce_augmented: None,
            embedding_distance: None,
        });
    }
    if augmented.len() != clean.len() {
        return Err(Error::shape("objective augmented batch", clean.len(), augmented.len()));
    }
    let joint: Vec<&FbankMatrix> = clean.iter().chain(augmented).copied().collect();
    let pass = model.forward(tape, model.input_tensor(&joint)?, Mode::Train)?;
    let b = clean.len();
    let logits_clean = tape.narrow(pass.logits, 0, b)?;
    let logits_aug = tape.narrow(pass.logits, b, b)?;
    let ce_clean = tape.softmax_cross_entropy(logits_clean, labels)?;
    let ce_aug = tape.softmax_cross_entropy(logits_aug, labels)?;
    let mut total = tape.add(ce_clean, ce_aug)?;
    let mut distance = None;
    if mode == DaMode::ActDa {
        let e_clean = tape.narrow(pass.embedding, 0, b)?;
        let e_aug = tape.narrow(pass.embedding, b, b)?;
        let d = tape.squared_l2_distance(e_clean, e_aug)?;
        total = tape.add(total, d)?;
        distance = Some(d);
    }
    Ok(Objective {
        pass,
        total,
        ce_clean,
        ce_augmented: Some(ce_aug),
        embedding_distance: distance,
    })
}

fn da_loss(
    model: &SpeakerNet,
    mode: DaMode,
    clean: &[&FbankMatrix],
    augmented: &[&FbankMatrix],
    labels: &[usize],
) -> Result<(LossTerms, NamedTensors)> {
    let mut tape = Tape::new();
    let obj = build_objective(model, &mut tape, mode, clean, augmented, labels)?;
    let grads = obj.param_gradients(&tape, obj.total)?;
    Ok((obj.terms(&tape), grads))
}

/// `CE(clean) + CE(augmented)` and its parameter gradients.
pub fn vanilla_da_loss(
    model: &SpeakerNet,
    clean: &[&FbankMatrix],
    augmented: &[&FbankMatrix],
    labels: &[usize],
) -> Result<(LossTerms, NamedTensors)> {
    da_loss(model, DaMode::VanillaDa, clean, augmented, labels)
}

/// Vanilla loss plus the mean squared Euclidean distance between clean and
/// augmented embeddings.
pub fn act_da_loss(
    model: &SpeakerNet,
    clean: &[&FbankMatrix],
    augmented: &[&FbankMatrix],
    labels: &[usize],
) -> Result<(LossTerms, NamedTensors)> {
    da_loss(model, DaMode::ActDa, clean, augmented, labels)
}

/// Interference clips of one type, counting every draw.
#[derive(Debug)]
pub struct InterferencePool {
    kind: InterferenceKind,
    clips: Vec<Waveform>,
    draws: Cell<usize>,
}

impl InterferencePool {
    pub fn new(kind: InterferenceKind, clips: Vec<Waveform>) -> Result<Self> {
        if clips.is_empty() || clips.iter().any(Waveform::is_empty) {
            return Err(Error::InvalidArgument(format!("empty {kind} interference pool")));
        }
        Ok(Self {
            kind,
            clips,
            draws: Cell::new(0),
        })
    }

    /// Training clips of `kind` from a manifest.
    pub fn from_manifest(manifest: &ExperimentManifest, audio_root: &Path, kind: InterferenceKind) -> Result<Self> {
        let clips = manifest
            .interference_clips(kind, Split::Train)
            .map(|r| manifest.waveform(&r.key, audio_root))
            .collect::<Result<Vec<_>>>()?;
        Self::new(kind, clips)
    }

    pub fn kind(&self) -> InterferenceKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Number of clips handed out so far.
    pub fn draws(&self) -> usize {
        self.draws.get()
    }

    pub fn draw(&self, rng: &mut impl Rng) -> &Waveform {
        self.draws.set(self.draws.get() + 1);
        &self.clips[rng.gen_range(0..self.clips.len())]
    }
}

/// Labeled clean training utterances.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub utterances: Vec<(Waveform, usize)>,
    pub n_speakers: usize,
}

impl TrainingSet {
    pub fn from_manifest(manifest: &ExperimentManifest, audio_root: &Path) -> Result<Self> {
        let utterances = manifest
            .targets(Split::Train)
            .map(|r| {
                let speaker = r.speaker.ok_or_else(|| Error::Manifest(format!("{}: no speaker", r.key)))?;
                Ok((manifest.waveform(&r.key, audio_root)?, speaker as usize))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            utterances,
            n_speakers: manifest.n_speakers(),
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ce_clean: f64,
    pub ce_augmented: Option<f64>,
    pub embedding_distance: Option<f64>,
    /// Top-1 accuracy on the clean training crops, from the training forward passes.
    pub train_accuracy: f64,
    pub wall_secs: f64,
}

fn random_crop(w: &Waveform, len: usize, rng: &mut impl Rng) -> Waveform {
    if len == 0 || w.len() <= len {
        return w.clone();
    }
    w.slice(rng.gen_range(0..=w.len() - len), len)
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::TrainingDiverged(format!("epoch {epoch}, batch {batch}: non-finite {op}")),
        Error::TrainingDiverged(m) => Error::TrainingDiverged(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Trains a fresh model. `pool` must be given for DA modes and must hold the
/// configured interference type; Base mode never draws from it. Each epoch
/// writes one JSON line to `log` when given.
pub fn train_on(
    data: &TrainingSet,
    pool: Option<&InterferencePool>,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    features: &FeatureExtractor,
    mut log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.n_speakers < 2 {
        return Err(Error::InvalidArgument(format!("training needs >= 2 speakers, got {}", data.n_speakers)));
    }
    if model_config.n_speakers != data.n_speakers {
        return Err(Error::ConfigMismatch {
            field: "model.n_speakers",
            expected: data.n_speakers.to_string(),
            found: model_config.n_speakers.to_string(),
        });
    }
    let pool = match (cfg.mode.uses_interference(), pool) {
        (false, _) => None,
        (true, None) => return Err(Error::InvalidArgument(format!("{} training needs an interference pool", cfg.mode))),
        (true, Some(p)) if p.kind() != cfg.mix.interference => {
            return Err(Error::ConfigMismatch {
                field: "train.mix.interference",
                expected: cfg.mix.interference.to_string(),
                found: p.kind().to_string(),
            })
        }
        (true, Some(p)) => Some(p),
    };

    let mut model = SpeakerNet::new(model_config.clone())?;
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let crop_len = if cfg.crop_frames == 0 { 0 } else { features.samples_for_frames(cfg.crop_frames) };
    let mut order: Vec<usize> = (0..data.utterances.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, 0), epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum, mut n_batches) = (LossTerms { total: 0.0, ce_clean: 0.0, ce_augmented: None, embedding_distance: None }, 0usize);
        let (mut aug_sum, mut dist_sum) = (0.0, 0.0);
        let (mut correct, mut seen) = (0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut clean = Vec::with_capacity(chunk.len());
            let mut augmented = Vec::new();
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (wave, label) = &data.utterances[i];
                let x = random_crop(wave, crop_len, &mut rng);
                if let Some(pool) = pool {
                    let clip = pool.draw(&mut rng);
                    let offset = rng.gen_range(0..clip.len());
                    let alpha = sample_alpha(&cfg.mix, &mut rng);
                    augmented.push(features.fbank(&mix_at(&x, clip, alpha, offset)?)?);
                }
                clean.push(features.fbank(&x)?);
                labels.push(*label);
            }
            let clean_refs: Vec<&FbankMatrix> = clean.iter().collect();
            let aug_refs: Vec<&FbankMatrix> = augmented.iter().collect();
            let mut tape = Tape::new();
            let obj = build_objective(&model, &mut tape, cfg.mode, &clean_refs, &aug_refs, &labels)
                .map_err(|e| diverged(epoch, b, e))?;
            let terms = obj.terms(&tape);
            if !terms.total.is_finite() {
                return Err(Error::TrainingDiverged(format!("epoch {epoch}, batch {b}: loss {}", terms.total)));
            }
            let grads = obj.param_gradients(&tape, obj.total).map_err(|e| diverged(epoch, b, e))?;
            opt.step(model.params_mut(), &grads).map_err(|e| diverged(epoch, b, e))?;
            model.update_running_stats(&tape, &obj.pass);

            let logits = tape.value(obj.pass.logits).data();
            let n_classes = data.n_speakers;
            for (row, &label) in logits.chunks(n_classes).take(labels.len()).zip(&labels) {
                let best = (0..n_classes).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
                correct += usize::from(best == label);
            }
            seen += labels.len();
            sum.total += terms.total;
            sum.ce_clean += terms.ce_clean;
            aug_sum += terms.ce_augmented.unwrap_or(0.0);
            dist_sum += terms.embedding_distance.unwrap_or(0.0);
            n_batches += 1;
        }
        let nb = n_batches.max(1) as f64;
        let record = EpochLog {
            epoch,
            loss: sum.total / nb,
            ce_clean: sum.ce_clean / nb,
            ce_augmented: cfg.mode.uses_interference().then_some(aug_sum / nb),
            embedding_distance: (cfg.mode == DaMode::ActDa).then_some(dist_sum / nb),
            train_accuracy: correct as f64 / seen.max(1) as f64,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut **w, &record)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(Checkpoint {
        model,
        metadata: TrainingMetadata {
            mode: cfg.mode,
            interference: cfg.interference(),
            epochs: cfg.epochs,
            seed: cfg.seed,
        },
    })
}

/// Loads the training split (and, for DA modes, the configured interference
/// pool) from `manifest` and trains.
pub fn train(
    manifest: &ExperimentManifest,
    audio_root: &Path,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    features: &FeatureExtractor,
    log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    let data = TrainingSet::from_manifest(manifest, audio_root)?;
    let pool = match cfg.interference() {
        Some(kind) => Some(InterferencePool::from_manifest(manifest, audio_root, kind)?),
        None => None,
    };
    train_on(&data, pool.as_ref(), model_config, cfg, features, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use rand_distr::StandardNormal;

    fn tone(freq: f64, n: usize) -> Waveform {
        Waveform::new(
            (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()).collect(),
            16_000,
        )
        .unwrap()
    }

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(), 16_000).unwrap()
    }

    #[test]
    fn zero_gain_is_identity() {
        let mut x = noise(1000, 1).into_samples();
        x[3] = -0.0;
        let x = Waveform::new(x, 16_000).unwrap();
        let y = mix(&x, &noise(300, 2), 0.0).unwrap();
        assert!(x.samples().iter().zip(y.samples()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn unit_gain_adds_tiled_interference() {
        let x = noise(1000, 3);
        let n = noise(300, 4);
        let y = mix(&x, &n, 1.0).unwrap();
        assert_eq!(y.len(), 1000);
        for i in 0..1000 {
            assert!((y.samples()[i] - x.samples()[i] - n.samples()[i % 300]).abs() < 1e-15);
        }
        let long = noise(5000, 5);
        let y = mix(&x, &long, 1.0).unwrap();
        assert!((y.samples()[999] - x.samples()[999] - long.samples()[999]).abs() < 1e-15);
    }

    #[test]
    fn coherent_sum_quadruples_energy() {
        let x = tone(440.0, 16_000);
        let y = mix(&x, &x, 1.0).unwrap();
        assert!((y.energy() / x.energy() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_is_linear_in_gain() {
        let x = noise(800, 6);
        let n = noise(500, 7);
        let a = mix(&x, &n, 0.3).unwrap();
        let b = mix(&x, &n, 0.9).unwrap();
        let ab = mix(&x, &n, 1.2).unwrap();
        for i in 0..800 {
            let lhs = a.samples()[i] + b.samples()[i] - x.samples()[i];
            assert!((lhs - ab.samples()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_rejects_rate_mismatch_and_negative_gain() {
        let x = noise(100, 1);
        let n = Waveform::new(vec![0.0; 10], 8000).unwrap();
        assert!(matches!(mix(&x, &n, 1.0), Err(Error::ConfigMismatch { .. })));
        assert!(mix(&x, &x, -1.0).is_err());
    }

    #[test]
    fn alpha_draws_are_uniform_and_reproducible() {
        let spec = MixSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_alpha(&spec, &mut rng)).collect();
        assert!(draws.iter().all(|a| (0.1..=2.0).contains(a)));
        // Uniform(0.1, 2.0): mean (0.1 + 2.0) / 2.
        let expected_mean = (0.1 + 2.0) / 2.0;
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - expected_mean).abs() < 0.02, "{mean}");
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(sample_alpha(&spec, &mut rng), draws[0]);
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in DaMode::ALL {
            assert_eq!(m.to_string().parse::<DaMode>().unwrap(), m);
        }
        assert!("fancy".parse::<DaMode>().is_err());
    }

    fn tiny_model() -> SpeakerNet {
        SpeakerNet::new(ModelConfig {
            n_mels: 8,
            stage_channels: [2, 3, 4, 4],
            embedding_dim: 4,
            n_speakers: 3,
            seed: 7,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn features(seed: u64) -> FbankMatrix {
        let fx = FeatureExtractor::new(StftConfig::default(), 8, 16_000, -80.0).unwrap();
        fx.fbank(&noise(160 * 11 + 240, seed)).unwrap()
    }

    #[test]
    fn duplicate_input_doubles_cross_entropy() {
        let model = tiny_model();
        let (a, b) = (features(1), features(2));
        let clean = [&a, &b];
        let (base, _) = da_loss(&model, DaMode::Base, &clean, &[], &[0, 2]).unwrap();
        let (vanilla, _) = vanilla_da_loss(&model, &clean, &clean, &[0, 2]).unwrap();
        assert!((vanilla.total - 2.0 * base.total).abs() < 1e-12);
        let (act, _) = act_da_loss(&model, &clean, &clean, &[0, 2]).unwrap();
        assert_eq!(act.embedding_distance, Some(0.0));
        assert_eq!(act.total, vanilla.total);
    }

    #[test]
    fn act_loss_dominates_vanilla_loss() {
        let model = tiny_model();
        let (a, b, c, d) = (features(1), features(2), features(3), features(4));
        let (v, _) = vanilla_da_loss(&model, &[&a, &b], &[&c, &d], &[1, 1]).unwrap();
        let (act, _) = act_da_loss(&model, &[&a, &b], &[&c, &d], &[1, 1]).unwrap();
        assert!(v.total >= 0.0);
        assert!(act.total >= v.total);
        assert!(act.embedding_distance.unwrap() > 0.0);
    }

    #[test]
    fn joint_gradient_is_sum_of_term_gradients() {
        let model = tiny_model();
        let (a, b) = (features(5), features(6));
        let mut tape = Tape::new();
        let obj = build_objective(&model, &mut tape, DaMode::VanillaDa, &[&a], &[&b], &[2]).unwrap();
        let joint = obj.param_gradients(&tape, obj.total).unwrap();
        let g_clean = obj.param_gradients(&tape, obj.ce_clean).unwrap();
        let g_aug = obj.param_gradients(&tape, obj.ce_augmented.unwrap()).unwrap();
        for (name, g) in &joint {
            for ((j, c), n) in g.data().iter().zip(g_clean[name].data()).zip(g_aug[name].data()) {
                assert!((j - (c + n)).abs() < 1e-9, "{name}");
            }
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let model = tiny_model();
        let a = features(1);
        assert!(matches!(
            vanilla_da_loss(&model, &[&a], &[&a], &[3]),
            Err(Error::LabelOutOfRange { label: 3, n_classes: 3 })
        ));
    }

    fn toy_set() -> TrainingSet {
        let utterances = (0..6).map(|i| (tone(300.0 + 400.0 * (i % 2) as f64, 4000), i % 2)).collect();
        TrainingSet { utterances, n_speakers: 2 }
    }

    fn toy_model_config() -> ModelConfig {
        ModelConfig {
            n_mels: 8,
            stage_channels: [2, 2, 2, 2],
            embedding_dim: 4,
            n_speakers: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn base_training_never_reads_the_pool() {
        let fx = FeatureExtractor::new(StftConfig::default(), 8, 16_000, -80.0).unwrap();
        let pool = InterferencePool::new(InterferenceKind::Noise, vec![noise(2000, 1)]).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            crop_frames: 10,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let ck = train_on(&toy_set(), Some(&pool), &toy_model_config(), &cfg, &fx, Some(&mut log)).unwrap();
        assert_eq!(pool.draws(), 0);
        assert_eq!(ck.metadata.mode, DaMode::Base);
        assert_eq!(ck.metadata.interference, None);
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), 2);

        let cfg = TrainConfig { mode: DaMode::VanillaDa, ..cfg };
        train_on(&toy_set(), Some(&pool), &toy_model_config(), &cfg, &fx, None).unwrap();
        assert_eq!(pool.draws(), 2 * 6);
    }

    #[test]
    fn da_training_rejects_wrong_pool() {
        let fx = FeatureExtractor::new(StftConfig::default(), 8, 16_000, -80.0).unwrap();
        let pool = InterferencePool::new(InterferenceKind::Music, vec![noise(2000, 1)]).unwrap();
        let cfg = TrainConfig {
            mode: DaMode::ActDa,
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(train_on(&toy_set(), Some(&pool), &toy_model_config(), &cfg, &fx, None).is_err());
        assert!(train_on(&toy_set(), None, &toy_model_config(), &cfg, &fx, None).is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let fx = FeatureExtractor::new(StftConfig::default(), 8, 16_000, -80.0).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 1e12,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let err = train_on(&toy_set(), None, &toy_model_config(), &cfg, &fx, None).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged(_)), "{err}");
    }

    #[test]
    fn training_is_deterministic() {
        let fx = FeatureExtractor::new(StftConfig::default(), 8, 16_000, -80.0).unwrap();
        let pool = InterferencePool::new(InterferenceKind::Noise, vec![noise(3000, 9)]).unwrap();
        let cfg = TrainConfig {
            mode: DaMode::ActDa,
            epochs: 2,
            batch_size: 2,
            crop_frames: 12,
            ..TrainConfig::default()
        };
        let a = train_on(&toy_set(), Some(&pool), &toy_model_config(), &cfg, &fx, None).unwrap();
        let b = train_on(&toy_set(), Some(&pool), &toy_model_config(), &cfg, &fx, None).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
