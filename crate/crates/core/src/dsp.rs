//! Short-time spectral analysis, log-Mel filterbank features, masked
//! resynthesis and SNR.
//!
//! Conventions: a frame `t` covers samples `[t * hop, t * hop + frame_length)`;
//! there is no centre padding. Power spectra are scaled so that a full-scale
//! sinusoid peaks at 0 dB, and Fbank cells are `10 * log10` of mel-band power,
//! floored at `floor_db`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layercam::SaliencyMap;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FLOOR_DB: f64 = -80.0;
pub const DEFAULT_N_MELS: usize = 40;

/// SNR reported when the residual is exactly zero.
pub const SNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Copy of `[start, start + len)`, clamped to the signal.
    pub fn slice(&self, start: usize, len: usize) -> Waveform {
        let start = start.min(self.samples.len());
        let end = (start + len).min(self.samples.len());
        Waveform {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn truncated(&self, len: usize) -> Waveform {
        self.slice(0, len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    /// 25 ms frames, 10 ms hop at 16 kHz.
    fn default() -> Self {
        Self {
            frame_length: 400,
            hop: 160,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn freq_bins(&self) -> usize {
        self.frame_length / 2 + 1
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_length {
            0
        } else {
            1 + (len - self.frame_length) / self.hop
        }
    }

    /// Number of samples spanned by `frames` frames.
    pub fn span(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_length
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
    config: StftConfig,
    sample_rate: u32,
    signal_len: usize,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn freq_bins(&self) -> usize {
        self.bins
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Length of the waveform the spectrogram was computed from.
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, k: usize) -> Complex64 {
        self.data[t * self.bins + k]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Rebuild a spectrogram from this one's phase and the given magnitudes
    /// (`frames x bins`, row-major). Bins with zero magnitude here get phase 0.
    pub fn with_magnitudes(&self, magnitudes: &[f64]) -> Result<ComplexSpectrogram> {
        if magnitudes.len() != self.data.len() {
            return Err(Error::shape(
                "with_magnitudes",
                [self.frames, self.bins],
                magnitudes.len(),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(magnitudes)
            .map(|(z, &m)| {
                let norm = z.norm();
                if norm > 0.0 {
                    z * (m / norm)
                } else {
                    Complex64::new(m, 0.0)
                }
            })
            .collect();
        Ok(ComplexSpectrogram { data, ..self.clone() })
    }

    /// Replace the recorded signal length, e.g. when a donor phase comes from
    /// a signal of different length than the magnitudes' source.
    pub fn with_signal_len(mut self, signal_len: usize) -> Self {
        self.signal_len = signal_len;
        self
    }
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    }
}

pub fn stft(wave: &Waveform, config: &StftConfig) -> Result<ComplexSpectrogram> {
    if config.frame_length == 0 || config.hop == 0 {
        return Err(Error::InvalidArgument("frame_length and hop must be positive".into()));
    }
    if wave.len() < config.frame_length {
        return Err(Error::InputTooShort {
            len: wave.len(),
            frame_length: config.frame_length,
        });
    }
    let n = config.frame_length;
    let bins = config.freq_bins();
    let frames = config.frame_count(wave.len());
    let window = config.window.coefficients(n);
    let fft = plan(n, false);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut data = Vec::with_capacity(frames * bins);
    let x = wave.samples();
    for t in 0..frames {
        let start = t * config.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[start + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(ComplexSpectrogram {
        frames,
        bins,
        data,
        config: *config,
        sample_rate: wave.sample_rate(),
        signal_len: wave.len(),
    })
}

/// Steady-state overlap normaliser `sum_j w^2(r + j * hop)` for every residue
/// `r` in `0..hop`; all entries must be positive for reconstruction. Returns
/// the smallest of them.
fn check_reconstruction(window: &[f64], hop: usize) -> Result<f64> {
    let peak = window.iter().fold(0.0f64, |m, w| m.max(w * w));
    let mut min = f64::INFINITY;
    for r in 0..hop {
        let s: f64 = window.iter().skip(r).step_by(hop).map(|w| w * w).sum();
        if s <= 1e-10 * peak.max(f64::MIN_POSITIVE) {
            return Err(Error::ReconstructionCondition);
        }
        min = min.min(s);
    }
    Ok(min)
}

/// Weighted overlap-add inverse of [`stft`]. The overlap normaliser is
/// clamped from below at its steady-state minimum, so samples covered by
/// every overlapping frame are reconstructed exactly while the partially
/// covered edges are attenuated rather than amplified. Samples past the
/// last frame come out as zero.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let cfg = spec.config;
    let n = cfg.frame_length;
    let window = cfg.window.coefficients(n);
    let steady = check_reconstruction(&window, cfg.hop)?;
    let out_len = spec.signal_len.max(cfg.span(spec.frames));
    let mut num = vec![0.0; out_len];
    let mut den = vec![0.0; out_len];
    let fft = plan(n, true);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        buf[..spec.bins].copy_from_slice(frame);
        // Hermitian completion; DC and Nyquist must be real for a real signal.
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        for k in spec.bins..n {
            buf[k] = buf[n - k].conj();
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop;
        for i in 0..n {
            let v = buf[i].re / n as f64;
            num[start + i] += window[i] * v;
            den[start + i] += window[i] * window[i];
        }
    }
    let mut samples: Vec<f64> = num.iter().zip(&den).map(|(&a, &d)| a / d.max(steady)).collect();
    samples.truncate(spec.signal_len);
    Waveform::new(samples, spec.sample_rate)
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, equally spaced on the HTK mel scale
/// between 0 Hz and Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    bins: usize,
    sample_rate: u32,
    /// `n_mels x bins`, row-major.
    weights: Vec<f64>,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, frame_length: usize, sample_rate: u32) -> Result<Self> {
        let bins = frame_length / 2 + 1;
        if n_mels < 2 {
            return Err(Error::InvalidArgument(format!("n_mels must be >= 2, got {n_mels}")));
        }
        if n_mels > bins {
            return Err(Error::InvalidArgument(format!(
                "n_mels ({n_mels}) exceeds frequency bins ({bins})"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / frame_length as f64;
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                weights[m * bins + k] = w;
            }
        }
        Ok(Self {
            n_mels,
            bins,
            sample_rate,
            weights,
            centers: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn freq_bins(&self) -> usize {
        self.bins
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers
    }

    pub fn weight(&self, mel: usize, bin: usize) -> f64 {
        self.weights[mel * self.bins + bin]
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.weights[m * self.bins..(m + 1) * self.bins];
            *o = row.iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }

    /// Transposed-filterbank inverse: each linear bin receives the
    /// overlap-weighted average of the per-bin power densities of the bands
    /// covering it. Exact for flat spectra; bins outside every band get 0.
    pub fn invert(&self, mel_power: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut cover = vec![0.0; self.bins];
        for m in 0..self.n_mels {
            let row = &self.weights[m * self.bins..(m + 1) * self.bins];
            let mass: f64 = row.iter().sum();
            if mass <= 0.0 {
                continue;
            }
            let density = mel_power[m] / mass;
            for (k, &w) in row.iter().enumerate() {
                out[k] += w * density;
                cover[k] += w;
            }
        }
        for (o, c) in out.iter_mut().zip(&cover) {
            *o = if *c > 0.0 { (*o / c).max(0.0) } else { 0.0 };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbankMatrix {
    frames: usize,
    n_mels: usize,
    values: Vec<f64>,
    floor_db: f64,
    config: StftConfig,
    sample_rate: u32,
}

impl FbankMatrix {
    pub fn from_values(
        frames: usize,
        n_mels: usize,
        values: Vec<f64>,
        floor_db: f64,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        if values.len() != frames * n_mels {
            return Err(Error::shape("fbank", [frames, n_mels], values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fbank values"));
        }
        Ok(Self {
            frames,
            n_mels,
            values,
            floor_db,
            config,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.n_mels)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.values[t * self.n_mels + m]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn floor_db(&self) -> f64 {
        self.floor_db
    }

    pub fn stft_config(&self) -> StftConfig {
        self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Frames `[start, start + len)`.
    pub fn crop(&self, start: usize, len: usize) -> Result<FbankMatrix> {
        if start + len > self.frames || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop [{start}, {}) outside {} frames",
                start + len,
                self.frames
            )));
        }
        Ok(FbankMatrix {
            frames: len,
            values: self.values[start * self.n_mels..(start + len) * self.n_mels].to_vec(),
            ..self.clone()
        })
    }

    /// Copy with every cell where `delete(t, m)` holds set to the floor
    /// (silence) level.
    pub fn with_deleted(&self, mut delete: impl FnMut(usize, usize) -> bool) -> FbankMatrix {
        let mut out = self.clone();
        for t in 0..self.frames {
            for m in 0..self.n_mels {
                if delete(t, m) {
                    out.values[t * self.n_mels + m] = self.floor_db;
                }
            }
        }
        out
    }
}

/// Power spectrum scale such that a full-scale sinusoid peaks at 1.0.
fn power_scale(config: &StftConfig) -> f64 {
    let sum: f64 = config.window.coefficients(config.frame_length).iter().sum();
    4.0 / (sum * sum)
}

pub fn fbank(spec: &ComplexSpectrogram, n_mels: usize, floor_db: f64) -> Result<FbankMatrix> {
    let bank = MelFilterbank::new(n_mels, spec.config.frame_length, spec.sample_rate)?;
    fbank_with(spec, &bank, floor_db)
}

pub fn fbank_with(spec: &ComplexSpectrogram, bank: &MelFilterbank, floor_db: f64) -> Result<FbankMatrix> {
    if bank.freq_bins() != spec.bins {
        return Err(Error::shape("fbank", bank.freq_bins(), spec.bins));
    }
    let scale = power_scale(&spec.config);
    let floor = 10f64.powf(floor_db / 10.0);
    let n_mels = bank.n_mels();
    let mut values = vec![0.0; spec.frames * n_mels];
    let mut power = vec![0.0; spec.bins];
    for t in 0..spec.frames {
        for (p, z) in power.iter_mut().zip(spec.frame(t)) {
            *p = z.norm_sqr() * scale;
        }
        let out = &mut values[t * n_mels..(t + 1) * n_mels];
        bank.apply(&power, out);
        for v in out.iter_mut() {
            *v = 10.0 * v.max(floor).log10();
        }
    }
    FbankMatrix::from_values(spec.frames, n_mels, values, floor_db, spec.config, spec.sample_rate)
}

/// Waveform to Fbank with a cached filterbank.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stft: StftConfig,
    bank: MelFilterbank,
    floor_db: f64,
}

impl FeatureExtractor {
    pub fn new(stft: StftConfig, n_mels: usize, sample_rate: u32, floor_db: f64) -> Result<Self> {
        let bank = MelFilterbank::new(n_mels, stft.frame_length, sample_rate)?;
        Ok(Self { stft, bank, floor_db })
    }

    pub fn stft_config(&self) -> &StftConfig {
        &self.stft
    }

    pub fn n_mels(&self) -> usize {
        self.bank.n_mels()
    }

    pub fn floor_db(&self) -> f64 {
        self.floor_db
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn spectrogram(&self, wave: &Waveform) -> Result<ComplexSpectrogram> {
        if wave.sample_rate() != self.bank.sample_rate {
            return Err(Error::ConfigMismatch {
                field: "sample_rate",
                expected: self.bank.sample_rate.to_string(),
                found: wave.sample_rate().to_string(),
            });
        }
        stft(wave, &self.stft)
    }

    pub fn fbank(&self, wave: &Waveform) -> Result<FbankMatrix> {
        fbank_with(&self.spectrogram(wave)?, &self.bank, self.floor_db)
    }

    /// Samples needed to produce exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        self.stft.span(frames)
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(StftConfig::default(), DEFAULT_N_MELS, DEFAULT_SAMPLE_RATE, DEFAULT_FLOOR_DB)
            .expect("default feature config is valid")
    }
}

/// Masked Fbank back to a waveform. The mask scales mel-band power as a
/// soft gain, the filterbank transpose maps band power back to linear bins,
/// and the resulting magnitudes take the donor spectrogram's phase before
/// the ISTFT. An all-ones mask gives the unmasked resynthesis baseline and
/// an all-zeros mask gives silence.
pub fn resynthesize_masked(
    noisy_fbank: &FbankMatrix,
    mask: &SaliencyMap,
    donor_phase: &ComplexSpectrogram,
) -> Result<Waveform> {
    if mask.shape() != noisy_fbank.shape() {
        return Err(Error::shape("resynthesize_masked mask", noisy_fbank.shape(), mask.shape()));
    }
    if donor_phase.frames() != noisy_fbank.frames() {
        return Err(Error::shape(
            "resynthesize_masked donor frames",
            noisy_fbank.frames(),
            donor_phase.frames(),
        ));
    }
    let cfg = donor_phase.config();
    let bank = MelFilterbank::new(noisy_fbank.n_mels(), cfg.frame_length, donor_phase.sample_rate())?;
    let scale = power_scale(&cfg);
    let n_mels = noisy_fbank.n_mels();
    let bins = donor_phase.freq_bins();
    let mut mel_power = vec![0.0; n_mels];
    let mut lin = vec![0.0; bins];
    let mut magnitudes = Vec::with_capacity(noisy_fbank.frames() * bins);
    for t in 0..noisy_fbank.frames() {
        for m in 0..n_mels {
            mel_power[m] = mask.get(t, m) * 10f64.powf(noisy_fbank.get(t, m) / 10.0);
        }
        bank.invert(&mel_power, &mut lin);
        magnitudes.extend(lin.iter().map(|p| (p / scale).sqrt()));
    }
    istft(&donor_phase.with_magnitudes(&magnitudes)?)
}

/// `10 log10(sum ref^2 / sum (ref - est)^2)`, capped at [`SNR_CAP_DB`].
pub fn snr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape("snr", reference.len(), estimate.len()));
    }
    let signal = reference.energy();
    if signal <= 0.0 {
        return Err(Error::UndefinedSnr);
    }
    let residual: f64 = reference
        .samples()
        .iter()
        .zip(estimate.samples())
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    if residual <= 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / residual).log10()).min(SNR_CAP_DB))
}

/// Geometric over arithmetic mean of the frame-averaged power spectrum
/// (bins 1..N/2), in `(0, 1]`; 1 for a perfectly flat spectrum.
pub fn spectral_flatness(wave: &Waveform, config: &StftConfig) -> Result<f64> {
    let spec = stft(wave, config)?;
    let bins = spec.freq_bins();
    let mut avg = vec![0.0; bins];
    for t in 0..spec.frames() {
        for (a, z) in avg.iter_mut().zip(spec.frame(t)) {
            *a += z.norm_sqr();
        }
    }
    let band = &avg[1..bins - 1];
    let n = band.len() as f64;
    let log_mean = band.iter().map(|p| p.max(1e-300).ln()).sum::<f64>() / n;
    let mean = band.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Ok(0.0);
    }
    Ok(log_mean.exp() / mean)
}

/// Power-weighted mean frequency of the frame-averaged spectrum, in Hz.
pub fn spectral_centroid(wave: &Waveform, config: &StftConfig) -> Result<f64> {
    let spec = stft(wave, config)?;
    let bin_hz = wave.sample_rate() as f64 / config.frame_length as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for t in 0..spec.frames() {
        for (k, z) in spec.frame(t).iter().enumerate() {
            let p = z.norm_sqr();
            num += p * k as f64 * bin_hz;
            den += p;
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}
