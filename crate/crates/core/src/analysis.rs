//! Quantitative protocols over saliency maps: frame retention ratios on
//! concatenated utterances, saliency-mask denoising, the deletion test, and
//! top-k identification accuracy.

use serde::{Deserialize, Serialize};

use crate::dsp::{self, ComplexSpectrogram, FbankMatrix, Waveform};
use crate::error::{Error, Result};
use crate::layercam::{fused_saliency, SaliencyMap};
use crate::net::{predict_topk, SpeakerNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameLabel {
    TargetSpeech,
    Interference,
}

/// Per-frame ownership labels aligned to an Fbank frame grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabels {
    labels: Vec<FrameLabel>,
}

impl SegmentLabels {
    pub fn new(labels: Vec<FrameLabel>) -> Self {
        Self { labels }
    }

    pub fn labels(&self) -> &[FrameLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, FrameLabel> {
        self.labels.iter()
    }

    pub fn count(&self, label: FrameLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Saliency summed over mel bands, one value per frame.
pub fn frame_saliency(map: &SaliencyMap) -> Vec<f64> {
    (0..map.frames()).map(|t| map.row(t).iter().sum()).collect()
}

/// Frame threshold proportional to the number of mel bands.
pub fn default_frame_threshold(n_mels: usize) -> f64 {
    0.1875 * n_mels as f64
}

/// Fractions of target-speech and interference frames whose summed saliency
/// exceeds the threshold; `None` when the class has no frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub spr: Option<f64>,
    pub ipr: Option<f64>,
}

pub fn spr_ipr(map: &SaliencyMap, labels: &SegmentLabels, frame_threshold: f64) -> Result<Retention> {
    if labels.len() != map.frames() {
        return Err(Error::shape("spr_ipr labels", map.frames(), labels.len()));
    }
    if !(frame_threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("frame threshold must be > 0, got {frame_threshold}")));
    }
    let mut kept = [0usize; 2];
    let mut total = [0usize; 2];
    for (s, l) in frame_saliency(map).into_iter().zip(labels.iter()) {
        let i = (*l == FrameLabel::Interference) as usize;
        total[i] += 1;
        kept[i] += usize::from(s > frame_threshold);
    }
    let ratio = |i: usize| (total[i] > 0).then(|| kept[i] as f64 / total[i] as f64);
    Ok(Retention { spr: ratio(0), ipr: ratio(1) })
}

/// Resynthesises `mixture` through `mask` with the clean reference's phase
/// and scores it against the clean reference.
pub fn masked_snr(
    mask: &SaliencyMap,
    mixture_fbank: &FbankMatrix,
    clean_spectrogram: &ComplexSpectrogram,
    clean: &Waveform,
) -> Result<f64> {
    let estimate = dsp::resynthesize_masked(mixture_fbank, mask, clean_spectrogram)?;
    dsp::snr(clean, &estimate)
}

/// A clean utterance with an interference-overlapped copy of equal length.
#[derive(Debug, Clone)]
pub struct OverlapPair {
    pub clean: Waveform,
    pub mixture: Waveform,
    pub speaker: usize,
}

/// Mean resynthesis SNR per condition: `noisy` (all-ones mask) first, then
/// one row per named model using its fused saliency of the mixture as mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseTable {
    pub rows: Vec<(String, f64)>,
}

impl DenoiseTable {
    pub fn get(&self, condition: &str) -> Option<f64> {
        self.rows.iter().find(|(c, _)| c == condition).map(|r| r.1)
    }
}

pub const NOISY_CONDITION: &str = "noisy";

pub fn denoise_eval(
    models: &[(&str, &SpeakerNet)],
    pairs: &[OverlapPair],
    features: &dsp::FeatureExtractor,
) -> Result<DenoiseTable> {
    if pairs.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut sums = vec![0.0; models.len() + 1];
    for pair in pairs {
        if pair.clean.len() != pair.mixture.len() {
            return Err(Error::shape("denoise pair", pair.clean.len(), pair.mixture.len()));
        }
        let clean_spec = features.spectrogram(&pair.clean)?;
        let mixture_fbank = features.fbank(&pair.mixture)?;
        let (frames, n_mels) = mixture_fbank.shape();
        let ones = SaliencyMap::constant(frames, n_mels, 1.0)?;
        sums[0] += masked_snr(&ones, &mixture_fbank, &clean_spec, &pair.clean)?;
        for (i, (_, model)) in models.iter().enumerate() {
            let mask = fused_saliency(model, &mixture_fbank, pair.speaker)?.fused;
            sums[i + 1] += masked_snr(&mask, &mixture_fbank, &clean_spec, &pair.clean)?;
        }
    }
    let n = pairs.len() as f64;
    let mut rows = vec![(NOISY_CONDITION.to_string(), sums[0] / n)];
    rows.extend(models.iter().zip(&sums[1..]).map(|((name, _), s)| (name.to_string(), s / n)));
    Ok(DenoiseTable { rows })
}

/// Cells deleted at threshold `theta`: saliency below `theta`, or every cell
/// once `theta >= 1`.
pub fn masked_cells(map: &SaliencyMap, theta: f64) -> Vec<bool> {
    map.values().iter().map(|&s| theta >= 1.0 || s < theta).collect()
}

/// `n` evenly spaced thresholds covering `[0, 1]`.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeletionPoint {
    pub threshold: f64,
    pub masked_fraction: f64,
    pub top1_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionCurve {
    pub points: Vec<DeletionPoint>,
    pub auc: f64,
}

/// Trapezoidal area under accuracy over the threshold axis, divided by the
/// threshold span.
pub fn curve_auc(points: &[DeletionPoint]) -> f64 {
    match points {
        [] => 0.0,
        [p] => p.top1_accuracy,
        [first, .., last] => {
            let area: f64 = points
                .windows(2)
                .map(|w| 0.5 * (w[0].top1_accuracy + w[1].top1_accuracy) * (w[1].threshold - w[0].threshold))
                .sum();
            area / (last.threshold - first.threshold)
        }
    }
}

/// Clean and noisy Fbank of the same utterance, frame-aligned.
#[derive(Debug, Clone)]
pub struct DeletionPair {
    pub clean: FbankMatrix,
    pub noisy: FbankMatrix,
    pub speaker: usize,
}

/// Deletes clean-speech cells that the saliency model finds unimportant in
/// the noisy copy, and measures the judge's top-1 accuracy as the threshold
/// rises. Deleted cells are set to the Fbank floor (silence).
pub fn deletion_test(
    saliency_model: &SpeakerNet,
    judge: &SpeakerNet,
    pairs: &[DeletionPair],
    thresholds: &[f64],
) -> Result<DeletionCurve> {
    if pairs.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("deletion thresholds must be non-empty and strictly increasing".into()));
    }
    let mut correct = vec![0usize; thresholds.len()];
    let mut masked = vec![0usize; thresholds.len()];
    let mut cells = 0usize;
    for pair in pairs {
        if pair.clean.shape() != pair.noisy.shape() {
            return Err(Error::shape("deletion pair", pair.clean.shape(), pair.noisy.shape()));
        }
        let map = fused_saliency(saliency_model, &pair.noisy, pair.speaker)?.fused;
        let n_mels = pair.clean.n_mels();
        cells += map.values().len();
        for (i, &theta) in thresholds.iter().enumerate() {
            let mask = masked_cells(&map, theta);
            masked[i] += mask.iter().filter(|&&m| m).count();
            let deleted = pair.clean.with_deleted(|t, m| mask[t * n_mels + m]);
            let logits = judge.infer(&deleted)?.logits;
            correct[i] += usize::from(predict_topk(&logits, 1)?[0] == pair.speaker);
        }
    }
    let n = pairs.len() as f64;
    let points: Vec<DeletionPoint> = thresholds
        .iter()
        .zip(correct.iter().zip(&masked))
        .map(|(&threshold, (&c, &m))| DeletionPoint {
            threshold,
            masked_fraction: m as f64 / cells as f64,
            top1_accuracy: c as f64 / n,
        })
        .collect();
    let auc = curve_auc(&points);
    Ok(DeletionCurve { points, auc })
}

/// Fraction of rows whose label is among the `k` best logits, for each `k`.
pub fn topk_from_logits(logits: &[Vec<f64>], labels: &[usize], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if logits.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if logits.len() != labels.len() {
        return Err(Error::shape("topk labels", logits.len(), labels.len()));
    }
    ks.iter()
        .map(|&k| {
            let mut hits = 0usize;
            for (row, &label) in logits.iter().zip(labels) {
                hits += usize::from(predict_topk(row, k)?.contains(&label));
            }
            Ok((k, hits as f64 / logits.len() as f64))
        })
        .collect()
}

/// Top-k accuracy of `model` over labeled feature matrices.
pub fn topk_accuracy(model: &SpeakerNet, items: &[(FbankMatrix, usize)], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    let logits = items
        .iter()
        .map(|(fb, _)| Ok(model.infer(fb)?.logits))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = items.iter().map(|(_, l)| *l).collect();
    topk_from_logits(&logits, &labels, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layercam::MapSource;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(frames: usize, n_mels: usize, f: impl Fn(usize, usize) -> f64) -> SaliencyMap {
        let values = (0..frames).flat_map(|t| (0..n_mels).map(move |m| (t, m))).map(|(t, m)| f(t, m)).collect();
        SaliencyMap::new(frames, n_mels, values, 0, MapSource::Fused).unwrap()
    }

    fn halves(frames: usize) -> SegmentLabels {
        SegmentLabels::new(
            (0..frames)
                .map(|t| if t < frames / 2 { FrameLabel::TargetSpeech } else { FrameLabel::Interference })
                .collect(),
        )
    }

    #[test]
    fn frame_saliency_examples() {
        assert!(frame_saliency(&map(5, 40, |_, _| 1.0)).iter().all(|&v| v == 40.0));
        assert!(frame_saliency(&map(5, 40, |_, _| 0.0)).iter().all(|&v| v == 0.0));
        let single = frame_saliency(&map(10, 4, |t, m| if (t, m) == (7, 2) { 1.0 } else { 0.0 }));
        assert_eq!(single[7], 1.0);
        assert_eq!(single.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn retention_examples() {
        let perfect = map(20, 40, |t, _| if t < 10 { 1.0 } else { 0.0 });
        let r = spr_ipr(&perfect, &halves(20), 7.5).unwrap();
        assert_eq!((r.spr, r.ipr), (Some(1.0), Some(0.0)));
        let all = spr_ipr(&map(20, 40, |_, _| 1.0), &halves(20), 39.0).unwrap();
        assert_eq!((all.spr, all.ipr), (Some(1.0), Some(1.0)));
        let only_speech = SegmentLabels::new(vec![FrameLabel::TargetSpeech; 20]);
        assert_eq!(spr_ipr(&perfect, &only_speech, 7.5).unwrap().ipr, None);
        assert!(spr_ipr(&perfect, &halves(19), 7.5).is_err());
        assert!(spr_ipr(&perfect, &halves(20), 0.0).is_err());
        assert_eq!(default_frame_threshold(40), 7.5);
    }

    #[test]
    fn constant_curve_auc() {
        let points: Vec<DeletionPoint> = threshold_grid(21)
            .into_iter()
            .map(|threshold| DeletionPoint {
                threshold,
                masked_fraction: threshold,
                top1_accuracy: 0.37,
            })
            .collect();
        assert!((curve_auc(&points) - 0.37).abs() < 1e-12);
        let grid = threshold_grid(21);
        assert_eq!(grid.len(), 21);
        assert_eq!((grid[0], grid[20]), (0.0, 1.0));
    }

    #[test]
    fn random_logits_topk_is_k_over_n() {
        let n_classes = 16;
        let trials = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<Vec<f64>> = (0..trials).map(|_| (0..n_classes).map(|_| rng.gen::<f64>()).collect()).collect();
        let labels: Vec<usize> = (0..trials).map(|_| rng.gen_range(0..n_classes)).collect();
        for (k, acc) in topk_from_logits(&logits, &labels, &[1, 5, 10]).unwrap() {
            let p = k as f64 / n_classes as f64;
            let sigma = (p * (1.0 - p) / trials as f64).sqrt();
            assert!((acc - p).abs() < 3.0 * sigma, "k={k}: {acc} vs {p}");
        }
        let perfect: Vec<Vec<f64>> = labels.iter().map(|&l| (0..n_classes).map(|c| (c == l) as u8 as f64).collect()).collect();
        assert!(topk_from_logits(&perfect, &labels, &[1, 5]).unwrap().iter().all(|(_, a)| *a == 1.0));
        assert!(matches!(topk_from_logits(&[], &[], &[1]), Err(Error::EmptyTestSet)));
    }

    proptest! {
        #[test]
        fn masked_sets_are_nested(values in proptest::collection::vec(0.0f64..=1.0, 1..60), a in 0.0f64..1.2, b in 0.0f64..1.2) {
            let m = SaliencyMap::new(1, values.len(), values, 0, MapSource::Fused).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = masked_cells(&m, lo);
            let large = masked_cells(&m, hi);
            prop_assert!(small.iter().zip(&large).all(|(s, l)| !s || *l));
            prop_assert!(masked_cells(&m, 0.0).iter().all(|&x| !x));
            prop_assert!(masked_cells(&m, 1.0).iter().all(|&x| x));
        }

        #[test]
        fn retention_is_invariant_to_frame_reordering(
            rows in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 2..40), shift in 0usize..40
        ) {
            let n = rows.len();
            let values: Vec<f64> = rows.iter().flat_map(|(v, _)| [*v, *v]).collect();
            let labels: Vec<FrameLabel> = rows.iter().map(|(_, s)| if *s { FrameLabel::TargetSpeech } else { FrameLabel::Interference }).collect();
            let m = SaliencyMap::new(n, 2, values.clone(), 0, MapSource::Fused).unwrap();
            let r = spr_ipr(&m, &SegmentLabels::new(labels.clone()), 1.0).unwrap();
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let pv: Vec<f64> = perm.iter().flat_map(|&i| [values[2 * i], values[2 * i + 1]]).collect();
            let pl: Vec<FrameLabel> = perm.iter().map(|&i| labels[i]).collect();
            let pm = SaliencyMap::new(n, 2, pv, 0, MapSource::Fused).unwrap();
            let pr = spr_ipr(&pm, &SegmentLabels::new(pl), 1.0).unwrap();
            prop_assert_eq!(r, pr);
            for x in [r.spr, r.ipr].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}
