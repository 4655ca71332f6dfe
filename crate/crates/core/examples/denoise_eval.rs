//! Saliency maps as soft masks: resynthesises noisy mixtures with each
//! model's fused map and compares SNR against the unmasked baseline.
//!
//! cargo run --release --example denoise_eval

use spkcam::augment::DaMode;
use spkcam::config::RunConfig;
use spkcam::corpus::InterferenceKind;
use spkcam::experiment::Experiment;

const CONFIG: &str = "
[corpus]
n_speakers = 8
utterances_per_speaker = 20
[model]
n_speakers = 8
stage_channels = [8, 16, 32, 64]
[train]
epochs = 10
[analysis]
topk = [1]
max_test_utterances = 16
";

fn main() -> spkcam::Result<()> {
    let exp = Experiment::new(RunConfig::from_toml(CONFIG)?)?;
    let manifest = exp.synthetic_manifest()?;
    let kind = InterferenceKind::Noise;
    let base = exp.train(&manifest, DaMode::Base, None, None)?;
    let act = exp.train(&manifest, DaMode::ActDa, Some(kind), None)?;
    let tests = exp.test_sets(&manifest)?;
    let set = tests.kind(kind).expect("noise test set");
    let models = [("base", &base.model), ("act_da", &act.model)];
    for row in exp.denoise_rows(&models, set)? {
        println!("{:>7}: {:7.3} dB", row.model, row.value);
    }
    Ok(())
}
