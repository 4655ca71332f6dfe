mod common;

use rand::Rng;

use spkcam::autodiff::{BatchNormMode, Tape, Tensor};
use spkcam::layercam::{fused_saliency, layer_saliency, Grid, MapSource};
use spkcam::net::Mode;

use common::{random_fbank, random_tensor, rng, tiny_model};

struct ToyNet {
    h: usize,
    w: usize,
    k: usize,
    classes: usize,
    input: Vec<f64>,
    kernel: Vec<f64>,
    bias: Vec<f64>,
    head: Vec<f64>,
}

impl ToyNet {
    fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let (h, w, k, classes) = (r.gen_range(3..7), r.gen_range(3..7), r.gen_range(1..5), r.gen_range(2..5));
        let mut draw = |n: usize| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        Self {
            input: draw(h * w),
            kernel: draw(k * 9),
            bias: draw(k),
            head: draw(classes * k),
            h,
            w,
            k,
            classes,
        }
    }

    /// Direct 3x3 zero-padded convolution.
    fn activation(&self) -> Vec<f64> {
        let (h, w) = (self.h as isize, self.w as isize);
        let mut out = vec![0.0; self.k * self.h * self.w];
        for k in 0..self.k {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = self.bias[k];
                    for di in -1..=1isize {
                        for dj in -1..=1isize {
                            let (y, x) = (i + di, j + dj);
                            if y >= 0 && y < h && x >= 0 && x < w {
                                let wt = self.kernel[k * 9 + ((di + 1) * 3 + dj + 1) as usize];
                                acc += wt * self.input[(y * w + x) as usize];
                            }
                        }
                    }
                    out[k * self.h * self.w + (i * w + j) as usize] = acc;
                }
            }
        }
        out
    }

    /// The logit of class `c` is `sum_k head[c, k] * mean(A_k)`, so its
    /// gradient with respect to `A_k[i, j]` is `head[c, k] / (h * w)`.
    fn oracle(&self, c: usize) -> Vec<f64> {
        let act = self.activation();
        let plane = self.h * self.w;
        (0..plane)
            .map(|p| {
                let s: f64 = (0..self.k)
                    .map(|k| (self.head[c * self.k + k] / plane as f64).max(0.0) * act[k * plane + p])
                    .sum();
                s.max(0.0)
            })
            .collect()
    }

    fn tape_saliency(&self, c: usize) -> Grid {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, self.h, self.w], self.input.clone()).unwrap());
        let kw = tape.leaf(Tensor::new(vec![self.k, 1, 3, 3], self.kernel.clone()).unwrap());
        let kb = tape.leaf(Tensor::new(vec![self.k], self.bias.clone()).unwrap());
        let hw = tape.leaf(Tensor::new(vec![self.classes, self.k], self.head.clone()).unwrap());
        let act = tape.conv2d(x, kw, Some(kb), 1, 1).unwrap();
        let pooled = tape.global_avg_pool(act).unwrap();
        let logits = tape.linear(pooled, hw, None).unwrap();
        let score = tape.select(logits, 0, c).unwrap();
        let grads = tape.backward(score, &[act]).unwrap();
        layer_saliency(tape.value(act), grads.get(act).unwrap()).unwrap()
    }
}

#[test]
fn toy_network_matches_symbolic_oracle() {
    for seed in 0..20 {
        let net = ToyNet::random(seed);
        for c in 0..net.classes {
            let got = net.tape_saliency(c);
            let want = net.oracle(c);
            assert_eq!((got.rows, got.cols), (net.h, net.w));
            for (g, w) in got.values.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "seed {seed} class {c}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn activation_gradient_matches_finite_differences() {
    // Perturb the tap itself: the head sees A as an input, so the tape's
    // gradient source can be checked numerically.
    let mut r = rng(3);
    for _ in 0..10 {
        let (k, h, w, classes) = (r.gen_range(1..4), r.gen_range(2..5), r.gen_range(2..5), r.gen_range(2..4));
        let act = random_tensor(&mut r, &[1, k, h, w]);
        let gamma = random_tensor(&mut r, &[k]);
        let beta = random_tensor(&mut r, &[k]);
        let head = random_tensor(&mut r, &[classes, k]);
        let c = r.gen_range(0..classes);
        let mean = vec![0.1; k];
        let var = vec![1.5; k];
        let score = |a: &Tensor| {
            let mut tape = Tape::new();
            let a = tape.leaf(a.clone());
            let g = tape.leaf(gamma.clone());
            let b = tape.leaf(beta.clone());
            let hw = tape.leaf(head.clone());
            let y = tape.batchnorm_2d(a, g, b, BatchNormMode::Eval { mean: &mean, var: &var }).unwrap();
            let y = tape.relu(y).unwrap();
            let p = tape.global_avg_pool(y).unwrap();
            let l = tape.linear(p, hw, None).unwrap();
            let s = tape.select(l, 0, c).unwrap();
            (tape, a, s)
        };
        let (tape, a_id, s_id) = score(&act);
        let grad = tape.backward(s_id, &[a_id]).unwrap().remove(a_id).unwrap();
        let eps = 1e-6;
        let numeric: Vec<f64> = (0..act.numel())
            .map(|j| {
                let mut up = act.clone();
                up.data_mut()[j] += eps;
                let mut down = act.clone();
                down.data_mut()[j] -= eps;
                let (tu, _, su) = score(&up);
                let (td, _, sd) = score(&down);
                (tu.value(su).item() - td.value(sd).item()) / (2.0 * eps)
            })
            .collect();
        assert!(common::relative_error(grad.data(), &numeric) < 1e-6);
    }
}

fn bilinear_corners(grid: &Grid, rows: usize, cols: usize) -> Vec<f64> {
    let coord = |i: usize, src: usize, dst: usize| {
        if src == 1 || dst == 1 {
            (0, 0, 0.0)
        } else {
            let x = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (x.floor() as usize).min(src - 2);
            (i0, i0 + 1, x - i0 as f64)
        }
    };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let (r0, r1, fr) = coord(i, grid.rows, rows);
        for j in 0..cols {
            let (c0, c1, fc) = coord(j, grid.cols, cols);
            let v00 = grid.get(r0, c0);
            let v01 = grid.get(r0, c1);
            let v10 = grid.get(r1, c0);
            let v11 = grid.get(r1, c1);
            out.push((1.0 - fr) * ((1.0 - fc) * v00 + fc * v01) + fr * ((1.0 - fc) * v10 + fc * v11));
        }
    }
    out
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect()
}

#[test]
fn fused_map_is_mean_of_normalized_stage_maps() {
    let model = tiny_model(5);
    let mut r = rng(11);
    for c in 0..3 {
        let fb = random_fbank(&mut r, 17, 8);
        let out = fused_saliency(&model, &fb, c).unwrap();

        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, model.input_tensor(&[&fb]).unwrap(), Mode::Eval).unwrap();
        let s = tape.select(pass.logits, 0, c).unwrap();
        let grads = tape.backward(s, &pass.taps).unwrap();
        for (k, &tap) in pass.taps.iter().enumerate() {
            let raw = layer_saliency(tape.value(tap), grads.get(tap).unwrap()).unwrap();
            let want = min_max(&bilinear_corners(&raw, 17, 8));
            let stage = &out.stages[k];
            assert_eq!(stage.source(), MapSource::Stage(k as u8 + 1));
            for (g, w) in stage.values().iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "stage {k}: {g} vs {w}");
            }
        }
        for i in 0..out.fused.values().len() {
            let sum = out.stages.iter().fold(0.0, |acc, m| acc + m.values()[i]);
            assert_eq!(out.fused.values()[i], sum / 4.0);
        }
        assert_eq!(out.fused.source(), MapSource::Fused);
        assert_eq!(out.fused.target_class(), c);
    }
}

#[test]
fn maps_depend_on_the_target_class() {
    let model = tiny_model(9);
    let fb = random_fbank(&mut rng(2), 20, 8);
    let a = fused_saliency(&model, &fb, 0).unwrap().fused;
    let b = fused_saliency(&model, &fb, 1).unwrap().fused;
    assert!(a.l1_distance(&b).unwrap() > 1e-6);
    assert_eq!(fused_saliency(&model, &fb, 0).unwrap().fused, a);
    assert!(fused_saliency(&model, &fb, 3).is_err());
}
