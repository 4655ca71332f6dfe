//! Speech and interference preservation ratios of a base and a vanilla-DA
//! model on speech concatenated with interfering speech.
//!
//! cargo run --release --example spr_ipr

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
";

fn main() -> spkcam::Result<()> {
    let exp = Experiment::new(RunConfig::from_toml(CONFIG)?)?;
    let manifest = exp.synthetic_manifest()?;
    let kind = InterferenceKind::Speech;
    let tests = exp.test_sets(&manifest)?;
    let set = tests.kind(kind).expect("speech test set");
    println!("frame threshold {}", exp.config.frame_threshold());
    for (mode, interference) in [(DaMode::Base, None), (DaMode::VanillaDa, Some(kind))] {
        let ck = exp.train(&manifest, mode, interference, None)?;
        for row in exp.retention_rows(&mode.to_string(), &ck.model, set)? {
            println!("{:>10} {}: {:.3}", row.model, row.metric, row.value);
        }
    }
    Ok(())
}
