#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spkcam::augment::{build_objective, DaMode};
use spkcam::autodiff::{BatchNormMode, Tape, Tensor, TensorId};
use spkcam::config::RunConfig;
use spkcam::dsp::{FbankMatrix, StftConfig};
use spkcam::net::{ModelConfig, SpeakerNet};
use spkcam::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values in `[-1, -0.05] U [0.05, 1]`, away from the ReLU kink.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap()
}

/// Relative L2 distance between analytic and numeric gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let an = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / an.max(nn).max(1e-10)
}

#[derive(Debug)]
pub struct GradCase {
    pub name: String,
    pub rel_err: f64,
}

type Build = dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>;

/// Finite-difference check of one op: the op output is contracted with a
/// fixed random tensor to a scalar, and the gradient with respect to every
/// input is compared with central differences.
pub fn check_op(name: impl Into<String>, seed: u64, inputs: Vec<Tensor>, build: &Build) -> GradCase {
    let eval = |inputs: &[Tensor], proj: Option<&Tensor>| -> (Tape, TensorId, Vec<TensorId>, Tensor) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids).unwrap();
        let proj = match proj {
            Some(p) => p.clone(),
            None => random_tensor(&mut rng(seed ^ 0xABCD), tape.shape(out)),
        };
        let p = tape.leaf(proj.clone());
        let prod = tape.elementwise_mul(out, p).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, loss, ids, proj)
    };
    let (tape, loss, ids, proj) = eval(&inputs, None);
    let grads = tape.backward(loss, &ids).unwrap();
    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        analytic.extend_from_slice(grads.get(*id).unwrap().data());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let (tp, lp, ..) = eval(&plus, Some(&proj));
            let (tm, lm, ..) = eval(&minus, Some(&proj));
            numeric.push((tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h));
        }
    }
    GradCase {
        name: name.into(),
        rel_err: relative_error(&analytic, &numeric),
    }
}

/// Every differentiable primitive under several seeded random shapes.
pub fn primitive_cases(seeds: std::ops::Range<u64>) -> Vec<GradCase> {
    let mut cases = Vec::new();
    for seed in seeds {
        let mut r = rng(seed);
        let (n, c, h, w) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(3..6), r.gen_range(3..6));
        let o = r.gen_range(1..4);
        let stride = r.gen_range(1..3);
        let padding = r.gen_range(0..2);
        let x4 = random_tensor(&mut r, &[n, c, h, w]);
        let kernel = random_tensor(&mut r, &[o, c, 3, 3]);
        let bias = random_tensor(&mut r, &[o]);
        cases.push(check_op(format!("conv2d s{stride} p{padding} seed {seed}"), seed, vec![x4.clone(), kernel.clone(), bias], &move |t, ids| {
            t.conv2d(ids[0], ids[1], Some(ids[2]), stride, padding)
        }));
        cases.push(check_op(format!("conv2d no bias seed {seed}"), seed, vec![x4.clone(), kernel], &|t, ids| {
            t.conv2d(ids[0], ids[1], None, 1, 1)
        }));
        cases.push(check_op(format!("relu seed {seed}"), seed, vec![x4.clone()], &|t, ids| t.relu(ids[0])));
        cases.push(check_op(format!("sigmoid seed {seed}"), seed, vec![x4.clone()], &|t, ids| t.sigmoid(ids[0])));
        let gamma = positive_tensor(&mut r, &[c]);
        let beta = random_tensor(&mut r, &[c]);
        let bn_x = random_tensor(&mut r, &[2, c, h, w]);
        cases.push(check_op(format!("batchnorm train seed {seed}"), seed, vec![bn_x.clone(), gamma.clone(), beta.clone()], &|t, ids| {
            t.batchnorm_2d(ids[0], ids[1], ids[2], BatchNormMode::Train)
        }));
        let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
        cases.push(check_op(format!("batchnorm eval seed {seed}"), seed, vec![bn_x, gamma, beta], &move |t, ids| {
            t.batchnorm_2d(ids[0], ids[1], ids[2], BatchNormMode::Eval { mean: &mean, var: &var })
        }));
        cases.push(check_op(format!("global_avg_pool seed {seed}"), seed, vec![x4.clone()], &|t, ids| t.global_avg_pool(ids[0])));
        cases.push(check_op(format!("avg_pool2d seed {seed}"), seed, vec![x4.clone()], &|t, ids| t.avg_pool2d(ids[0], 2)));
        let (i, d) = (r.gen_range(1..5), r.gen_range(1..5));
        let x2 = random_tensor(&mut r, &[n, i]);
        let wl = random_tensor(&mut r, &[d, i]);
        let bl = random_tensor(&mut r, &[d]);
        cases.push(check_op(format!("linear seed {seed}"), seed, vec![x2.clone(), wl.clone(), bl], &|t, ids| {
            t.linear(ids[0], ids[1], Some(ids[2]))
        }));
        cases.push(check_op(format!("linear no bias seed {seed}"), seed, vec![x2.clone(), wl], &|t, ids| t.linear(ids[0], ids[1], None)));
        let y4 = random_tensor(&mut r, &[n, c, h, w]);
        cases.push(check_op(format!("add seed {seed}"), seed, vec![x4.clone(), y4.clone()], &|t, ids| t.add(ids[0], ids[1])));
        let s = r.gen_range(-2.0..2.0);
        cases.push(check_op(format!("mul_scalar seed {seed}"), seed, vec![x4.clone()], &move |t, ids| t.mul_scalar(ids[0], s)));
        cases.push(check_op(format!("elementwise_mul seed {seed}"), seed, vec![x4.clone(), y4], &|t, ids| {
            t.elementwise_mul(ids[0], ids[1])
        }));
        let gate = random_tensor(&mut r, &[n, c]);
        cases.push(check_op(format!("channel gate seed {seed}"), seed, vec![x4, gate], &|t, ids| t.elementwise_mul(ids[0], ids[1])));
        let classes = r.gen_range(2..6);
        let logits = random_tensor(&mut r, &[3, classes]);
        let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..classes)).collect();
        cases.push(check_op(format!("softmax_cross_entropy seed {seed}"), seed, vec![logits.clone()], &move |t, ids| {
            t.softmax_cross_entropy(ids[0], &labels)
        }));
        let other = random_tensor(&mut r, &[3, classes]);
        cases.push(check_op(format!("squared_l2_distance seed {seed}"), seed, vec![logits.clone(), other], &|t, ids| {
            t.squared_l2_distance(ids[0], ids[1])
        }));
        cases.push(check_op(format!("sum seed {seed}"), seed, vec![x2], &|t, ids| t.sum(ids[0])));
        let col = r.gen_range(0..classes);
        cases.push(check_op(format!("select seed {seed}"), seed, vec![logits.clone()], &move |t, ids| t.select(ids[0], 1, col)));
        cases.push(check_op(format!("narrow seed {seed}"), seed, vec![logits], &|t, ids| t.narrow(ids[0], 1, 2)));
    }
    cases
}

pub fn tiny_model(seed: u64) -> SpeakerNet {
    SpeakerNet::new(ModelConfig {
        n_mels: 8,
        stage_channels: [2, 3, 4, 4],
        embedding_dim: 4,
        n_speakers: 3,
        stem_stride: 1,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

/// Fbank-like matrix with values spread over the dynamic range.
pub fn random_fbank(rng: &mut ChaCha8Rng, frames: usize, n_mels: usize) -> FbankMatrix {
    let values = (0..frames * n_mels).map(|_| rng.gen_range(-80.0..0.0)).collect();
    FbankMatrix::from_values(frames, n_mels, values, -80.0, StftConfig::default(), 16_000).unwrap()
}

/// Finite-difference check of the full training objective of `mode` with
/// respect to a random sample of model parameters.
pub fn model_loss_case(mode: DaMode, seed: u64, coords: usize) -> GradCase {
    let mut r = rng(seed);
    let mut model = tiny_model(seed);
    let clean: Vec<FbankMatrix> = (0..2).map(|_| random_fbank(&mut r, 12, 8)).collect();
    let aug: Vec<FbankMatrix> = (0..2).map(|_| random_fbank(&mut r, 12, 8)).collect();
    let labels = vec![r.gen_range(0..3), r.gen_range(0..3)];
    let loss = |m: &SpeakerNet| -> f64 {
        let mut tape = Tape::new();
        let c: Vec<&FbankMatrix> = clean.iter().collect();
        let a: Vec<&FbankMatrix> = aug.iter().collect();
        let obj = build_objective(m, &mut tape, mode, &c, &a, &labels).unwrap();
        tape.value(obj.total).item()
    };
    let grads = {
        let mut tape = Tape::new();
        let c: Vec<&FbankMatrix> = clean.iter().collect();
        let a: Vec<&FbankMatrix> = aug.iter().collect();
        let obj = build_objective(&model, &mut tape, mode, &c, &a, &labels).unwrap();
        obj.param_gradients(&tape, obj.total).unwrap()
    };
    let names: Vec<String> = model.params().keys().cloned().collect();
    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..coords {
        let name = &names[r.gen_range(0..names.len())];
        let j = r.gen_range(0..model.params()[name].numel());
        analytic.push(grads[name].data()[j]);
        let orig = model.params()[name].data()[j];
        model.params_mut().get_mut(name).unwrap().data_mut()[j] = orig + h;
        let up = loss(&model);
        model.params_mut().get_mut(name).unwrap().data_mut()[j] = orig - h;
        let down = loss(&model);
        model.params_mut().get_mut(name).unwrap().data_mut()[j] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    GradCase {
        name: format!("{mode} objective seed {seed}"),
        rel_err: relative_error(&analytic, &numeric),
    }
}

/// A configuration small enough to train end to end in seconds.
pub fn tiny_run_config(seed: u64) -> RunConfig {
    let text = format!(
        "seed = {seed}\n\
         [corpus]\nn_speakers = 4\nutterances_per_speaker = 5\nutterance_secs = 1.0\n\
         n_interference_speakers = 2\nnoise_clips = 3\nspeech_clips = 3\nmusic_clips = 3\n\
         interference_secs = 1.0\nconcat_interference_secs = 0.5\n\
         [model]\nn_speakers = 4\nstage_channels = [2, 4, 4, 8]\nembedding_dim = 8\n\
         [train]\nepochs = 2\nbatch_size = 4\ncrop_frames = 60\n\
         [analysis]\ntopk = [1, 2]\ndeletion_thresholds = 5\n"
    );
    RunConfig::from_toml(&text).unwrap()
}
