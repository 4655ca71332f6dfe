//! SE-ResNet-lite speaker classifier.
//!
//! ```text
//! Fbank [T, F] -> (x - floor_db) / 20 -> [N, 1, T, F]
//! stem:   conv3x3(stride = stem_stride) -> BN -> ReLU
//! stage1: blocks, stride 1                          -> tap 1
//! stage2: blocks, first stride 2                    -> tap 2
//! stage3: blocks, first stride 2                    -> tap 3
//! stage4: blocks, first stride 2                    -> tap 4
//! head:   global average pool -> linear (embedding) -> linear (logits)
//! ```
//!
//! Each basic block is `conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> SE`, added
//! to an identity or `conv1x1 -> BN` shortcut, then ReLU. A stride-2
//! 3x3 conv with padding 1 maps a length `L` axis to `(L - 1) / 2 + 1`.
//!
//! Input scaling puts the Fbank floor (silence) at exactly zero, so deleting a
//! time-frequency bin means setting it to the floor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, NamedTensors, Tape, Tensor, TensorId};
use crate::dsp::FbankMatrix;
use crate::error::{Error, Result};

/// Fbank dB per unit of network input.
pub const INPUT_SCALE_DB: f64 = 20.0;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub embedding_dim: usize,
    pub n_speakers: usize,
    pub se_reduction: usize,
    pub stem_stride: usize,
    /// Initialisation seed; run configs derive it from the global seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
            embedding_dim: 64,
            n_speakers: 16,
            se_reduction: 8,
            stem_stride: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.n_mels > 0
            && self.stage_channels.iter().all(|&c| c > 0)
            && self.blocks_per_stage.iter().all(|&b| b > 0)
            && self.embedding_dim > 0
            && self.se_reduction > 0
            && self.stem_stride > 0;
        if !positive {
            return Err(Error::Config(format!("model config must be all positive: {self:?}")));
        }
        if self.n_speakers < 2 {
            return Err(Error::Config(format!("n_speakers must be >= 2, got {}", self.n_speakers)));
        }
        Ok(())
    }

    fn stage_stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    /// `(rows, cols)` of each stage tap for a `frames x n_mels` input.
    pub fn tap_shapes(&self, frames: usize) -> [(usize, usize); 4] {
        let down = |len: usize, stride: usize| (len - 1) / stride + 1;
        let mut r = down(frames, self.stem_stride);
        let mut c = down(self.n_mels, self.stem_stride);
        let mut out = [(0, 0); 4];
        for (s, slot) in out.iter_mut().enumerate() {
            r = down(r, Self::stage_stride(s));
            c = down(c, Self::stage_stride(s));
            *slot = (r, c);
        }
        out
    }

    fn se_hidden(&self, channels: usize) -> usize {
        (channels / self.se_reduction).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Ids of one forward pass on a tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub embedding: TensorId,
    pub logits: TensorId,
    /// Post-activation output of the last block of each stage.
    pub taps: [TensorId; 4],
    pub params: BTreeMap<String, TensorId>,
    bn_nodes: Vec<(String, TensorId)>,
}

impl ForwardPass {
    pub fn param_ids(&self) -> Vec<TensorId> {
        self.params.values().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerNet {
    config: ModelConfig,
    params: NamedTensors,
    buffers: NamedTensors,
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{}.block{}", stage + 1, block)
}

struct ParamInit<'a> {
    rng: ChaCha8Rng,
    params: &'a mut NamedTensors,
    buffers: &'a mut NamedTensors,
}

impl ParamInit<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.params.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    /// He-uniform: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) {
        let fan_in = (in_c * k * k) as f64;
        self.uniform(format!("{name}.weight"), &[out_c, in_c, k, k], (6.0 / fan_in).sqrt());
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
    }

    fn linear(&mut self, name: &str, out_d: usize, in_d: usize) {
        self.uniform(format!("{name}.weight"), &[out_d, in_d], 1.0 / (in_d as f64).sqrt());
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out_d]));
    }
}

struct Builder<'a> {
    net: &'a SpeakerNet,
    tape: &'a mut Tape,
    ids: BTreeMap<String, TensorId>,
    mode: Mode,
    bn_nodes: Vec<(String, TensorId)>,
}

impl Builder<'_> {
    fn p(&self, name: &str) -> TensorId {
        self.ids[name]
    }

    fn conv(&mut self, x: TensorId, name: &str, stride: usize, padding: usize) -> Result<TensorId> {
        let w = self.p(&format!("{name}.weight"));
        self.tape.conv2d(x, w, None, stride, padding)
    }

    fn bn(&mut self, x: TensorId, name: &str) -> Result<TensorId> {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let y = match self.mode {
            Mode::Train => self.tape.batchnorm_2d(x, gamma, beta, BatchNormMode::Train)?,
            Mode::Eval => {
                let mean = self.net.buffers[&format!("{name}.running_mean")].data();
                let var = self.net.buffers[&format!("{name}.running_var")].data();
                self.tape.batchnorm_2d(x, gamma, beta, BatchNormMode::Eval { mean, var })?
            }
        };
        self.bn_nodes.push((name.to_string(), y));
        Ok(y)
    }

    fn linear(&mut self, x: TensorId, name: &str) -> Result<TensorId> {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        self.tape.linear(x, w, Some(b))
    }

    fn se(&mut self, x: TensorId, name: &str) -> Result<TensorId> {
        let pooled = self.tape.global_avg_pool(x)?;
        let h = self.linear(pooled, &format!("{name}.fc1"))?;
        let h = self.tape.relu(h)?;
        let s = self.linear(h, &format!("{name}.fc2"))?;
        let gate = self.tape.sigmoid(s)?;
        self.tape.elementwise_mul(x, gate)
    }

    fn block(&mut self, x: TensorId, name: &str, stride: usize, projection: bool) -> Result<TensorId> {
        let y = self.conv(x, &format!("{name}.conv1"), stride, 1)?;
        let y = self.bn(y, &format!("{name}.bn1"))?;
        let y = self.tape.relu(y)?;
        let y = self.conv(y, &format!("{name}.conv2"), 1, 1)?;
        let y = self.bn(y, &format!("{name}.bn2"))?;
        let y = self.se(y, &format!("{name}.se"))?;
        let shortcut = if projection {
            let s = self.conv(x, &format!("{name}.shortcut.conv"), stride, 0)?;
            self.bn(s, &format!("{name}.shortcut.bn"))?
        } else {
            x
        };
        let sum = self.tape.add(y, shortcut)?;
        self.tape.relu(sum)
    }
}

impl SpeakerNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = NamedTensors::new();
        let mut buffers = NamedTensors::new();
        let mut init = ParamInit {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: &mut params,
            buffers: &mut buffers,
        };
        let c0 = config.stage_channels[0];
        init.conv("stem.conv", c0, 1, 3);
        init.bn("stem.bn", c0);
        let mut in_c = c0;
        for s in 0..4 {
            let out_c = config.stage_channels[s];
            for b in 0..config.blocks_per_stage[s] {
                let name = block_prefix(s, b);
                let block_in = if b == 0 { in_c } else { out_c };
                let stride = if b == 0 { ModelConfig::stage_stride(s) } else { 1 };
                init.conv(&format!("{name}.conv1"), out_c, block_in, 3);
                init.bn(&format!("{name}.bn1"), out_c);
                init.conv(&format!("{name}.conv2"), out_c, out_c, 3);
                init.bn(&format!("{name}.bn2"), out_c);
                let hidden = config.se_hidden(out_c);
                init.linear(&format!("{name}.se.fc1"), hidden, out_c);
                init.linear(&format!("{name}.se.fc2"), out_c, hidden);
                if stride != 1 || block_in != out_c {
                    init.conv(&format!("{name}.shortcut.conv"), out_c, block_in, 1);
                    init.bn(&format!("{name}.shortcut.bn"), out_c);
                }
            }
            in_c = out_c;
        }
        init.linear("embed", config.embedding_dim, in_c);
        init.linear("classifier", config.n_speakers, config.embedding_dim);
        Ok(Self { config, params, buffers })
    }

    /// Rebuilds a network from stored tensors, checking every name and shape
    /// against what `config` implies.
    pub fn from_parts(config: ModelConfig, params: NamedTensors, buffers: NamedTensors) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        for (kind, expected, got) in [("parameter", &reference.params, &params), ("buffer", &reference.buffers, &buffers)] {
            if expected.len() != got.len() {
                return Err(Error::MalformedCheckpoint(format!(
                    "{} {kind} tensors, config implies {}",
                    got.len(),
                    expected.len()
                )));
            }
            for (name, t) in expected {
                match got.get(name) {
                    Some(g) if g.shape() == t.shape() => {}
                    Some(g) => {
                        return Err(Error::MalformedCheckpoint(format!(
                            "{kind} {name} has shape {:?}, config implies {:?}",
                            g.shape(),
                            t.shape()
                        )))
                    }
                    None => return Err(Error::MalformedCheckpoint(format!("missing {kind} {name}"))),
                }
            }
        }
        Ok(Self { config, params, buffers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &NamedTensors {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedTensors {
        &mut self.params
    }

    pub fn buffers(&self) -> &NamedTensors {
        &self.buffers
    }

    /// Stacks Fbank matrices of equal frame count into `[N, 1, T, F]`.
    pub fn input_tensor(&self, batch: &[&FbankMatrix]) -> Result<Tensor> {
        let first = batch
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let frames = first.frames();
        let mut data = Vec::with_capacity(batch.len() * frames * self.config.n_mels);
        for fb in batch {
            if fb.n_mels() != self.config.n_mels {
                return Err(Error::ConfigMismatch {
                    field: "n_mels",
                    expected: self.config.n_mels.to_string(),
                    found: fb.n_mels().to_string(),
                });
            }
            if fb.frames() != frames {
                return Err(Error::shape("input_tensor frames", frames, fb.frames()));
            }
            let floor = fb.floor_db();
            data.extend(fb.values().iter().map(|v| (v - floor) / INPUT_SCALE_DB));
        }
        Tensor::new(vec![batch.len(), 1, frames, self.config.n_mels], data)
    }

    pub fn forward(&self, tape: &mut Tape, input: Tensor, mode: Mode) -> Result<ForwardPass> {
        match input.shape() {
            [_, 1, _, f] if *f == self.config.n_mels => {}
            [_, 1, _, f] => {
                return Err(Error::ConfigMismatch {
                    field: "n_mels",
                    expected: self.config.n_mels.to_string(),
                    found: f.to_string(),
                })
            }
            s => return Err(Error::shape("forward input", "[N, 1, T, n_mels]", s)),
        }
        let x = tape.leaf(input);
        let ids = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        let mut b = Builder {
            net: self,
            tape,
            ids,
            mode,
            bn_nodes: Vec::new(),
        };
        let y = b.conv(x, "stem.conv", self.config.stem_stride, 1)?;
        let y = b.bn(y, "stem.bn")?;
        let mut y = b.tape.relu(y)?;
        let mut in_c = self.config.stage_channels[0];
        let mut taps = [x; 4];
        for (s, tap) in taps.iter_mut().enumerate() {
            let out_c = self.config.stage_channels[s];
            for blk in 0..self.config.blocks_per_stage[s] {
                let block_in = if blk == 0 { in_c } else { out_c };
                let stride = if blk == 0 { ModelConfig::stage_stride(s) } else { 1 };
                y = b.block(y, &block_prefix(s, blk), stride, stride != 1 || block_in != out_c)?;
            }
            *tap = y;
            in_c = out_c;
        }
        let pooled = b.tape.global_avg_pool(y)?;
        let embedding = b.linear(pooled, "embed")?;
        let logits = b.linear(embedding, "classifier")?;
        Ok(ForwardPass {
            embedding,
            logits,
            taps,
            params: b.ids,
            bn_nodes: b.bn_nodes,
        })
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// statistics (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, tape: &Tape, pass: &ForwardPass) {
        for (name, id) in &pass.bn_nodes {
            let Some((mean, var)) = tape.batch_stats(*id) else { continue };
            let shape = tape.shape(*id);
            let count = (shape[0] * shape[2] * shape[3]) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let rm = self.buffers.get_mut(&format!("{name}.running_mean")).expect("bn buffer");
            for (r, m) in rm.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.buffers.get_mut(&format!("{name}.running_var")).expect("bn buffer");
            for (r, v) in rv.data_mut().iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    pub fn infer(&self, features: &FbankMatrix) -> Result<Inference> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, self.input_tensor(&[features])?, Mode::Eval)?;
        Ok(Inference {
            embedding: tape.value(pass.embedding).data().to_vec(),
            logits: tape.value(pass.logits).data().to_vec(),
        })
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// The `k` highest-scoring class ids, best first; ties go to the lower id.
pub fn predict_topk(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            logits.len()
        )));
    }
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.truncate(k);
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_mels: 12,
            stage_channels: [4, 8, 8, 16],
            embedding_dim: 8,
            n_speakers: 5,
            ..ModelConfig::default()
        }
    }

    fn features(frames: usize, n_mels: usize, seed: u64) -> FbankMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..frames * n_mels).map(|_| rng.gen_range(-60.0..-10.0)).collect();
        FbankMatrix::from_values(frames, n_mels, values, -80.0, StftConfig::default(), 16_000).unwrap()
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = SpeakerNet::new(tiny_config()).unwrap();
        let fb = features(20, 12, 1);
        assert_eq!(net.infer(&fb).unwrap(), net.infer(&fb).unwrap());
    }

    #[test]
    fn zero_head_gives_equal_logits_and_softmax_normalizes() {
        let mut net = SpeakerNet::new(tiny_config()).unwrap();
        let w = net.params_mut().get_mut("classifier.weight").unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let out = net.infer(&features(16, 12, 2)).unwrap();
        assert_eq!(out.logits.len(), 5);
        assert!(out.logits.iter().all(|&l| l == out.logits[0]));
        let fresh = SpeakerNet::new(tiny_config()).unwrap().infer(&features(16, 12, 2)).unwrap();
        assert_eq!(fresh.embedding.len(), 8);
        assert!((softmax(&fresh.logits).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mel_mismatch_rejected() {
        let net = SpeakerNet::new(tiny_config()).unwrap();
        let err = net.infer(&features(16, 13, 3)).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch { field: "n_mels", .. }));
    }

    #[test]
    fn taps_follow_downsampling_schedule() {
        let cfg = ModelConfig {
            stem_stride: 2,
            ..tiny_config()
        };
        let net = SpeakerNet::new(cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let input = net.input_tensor(&[&features(37, 12, 4)]).unwrap();
        let pass = net.forward(&mut tape, input, Mode::Eval).unwrap();
        let expected = cfg.tap_shapes(37);
        assert_eq!(expected, [(19, 6), (10, 3), (5, 2), (3, 1)]);
        let mut prev = usize::MAX;
        for (tap, (r, c)) in pass.taps.iter().zip(expected) {
            let s = tape.shape(*tap);
            assert_eq!((s[2], s[3]), (r, c));
            assert!(r * c < prev);
            prev = r * c;
        }
    }

    #[test]
    fn topk_examples() {
        assert_eq!(predict_topk(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(predict_topk(&[0.0; 5], 3).unwrap(), vec![0, 1, 2]);
        assert!(predict_topk(&[0.0; 5], 0).is_err());
        assert!(predict_topk(&[0.0; 5], 6).is_err());
    }

    #[test]
    fn topk_sets_nest() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t1 = predict_topk(&logits, 1).unwrap();
            let t5 = predict_topk(&logits, 5).unwrap();
            let t10 = predict_topk(&logits, 10).unwrap();
            assert!(t1.iter().all(|i| t5.contains(i)));
            assert!(t5.iter().all(|i| t10.contains(i)));
        }
    }
}
