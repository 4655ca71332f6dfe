//! STFT -> ISTFT round trip, log-Mel features and masked resynthesis of a
//! synthetic utterance.
//!
//! cargo run --release --example stft_roundtrip

use spkcam::corpus::{synth_utterance, SyntheticSpeakerProfile};
use spkcam::dsp::{istft, resynthesize_masked, snr, FeatureExtractor};
use spkcam::layercam::SaliencyMap;

fn main() -> spkcam::Result<()> {
    let fx = FeatureExtractor::default();
    let voice = SyntheticSpeakerProfile::random(0, 42);
    let x = synth_utterance(&voice, 1.5, 7)?;

    let spec = fx.spectrogram(&x)?;
    let y = istft(&spec)?;
    let cfg = fx.stft_config();
    let covered = cfg.frame_length - cfg.hop..spec.frames() * cfg.hop;
    let max_err = covered
        .map(|n| (x.samples()[n] - y.samples()[n]).abs())
        .fold(0.0, f64::max);
    println!("{} frames x {} bins, round-trip max error {max_err:.2e}", spec.frames(), spec.freq_bins());

    let fb = fx.fbank(&x)?;
    println!("fbank {} x {} (dB, floor {} dB)", fb.frames(), fb.n_mels(), fb.floor_db());

    for gain in [1.0, 0.5, 0.0] {
        let mask = SaliencyMap::constant(fb.frames(), fb.n_mels(), gain)?;
        let z = resynthesize_masked(&fb, &mask, &spec)?;
        let level = 20.0 * z.rms().max(1e-12).log10();
        match snr(&x, &z) {
            Ok(db) => println!("mask {gain}: {level:6.1} dBFS, SNR vs original {db:6.2} dB"),
            Err(e) => println!("mask {gain}: {level:6.1} dBFS, {e}"),
        }
    }
    Ok(())
}
