//! Trains a small speaker classifier with Act DA against music and reports
//! clean and interfered top-k accuracy.
//!
//! cargo run --release --example train_speaker_net

use spkcam::analysis::topk_accuracy;
use spkcam::augment::DaMode;
use spkcam::config::RunConfig;
use spkcam::corpus::{InterferenceKind, Scenario, Split};
use spkcam::experiment::Experiment;

const CONFIG: &str = "
[corpus]
n_speakers = 8
utterances_per_speaker = 20
[model]
n_speakers = 8
stage_channels = [8, 16, 32, 64]
[train]
epochs = 8
[analysis]
topk = [1, 3]
";

fn main() -> spkcam::Result<()> {
    let exp = Experiment::new(RunConfig::from_toml(CONFIG)?)?;
    let manifest = exp.synthetic_manifest()?;
    let mut log = std::io::stdout();
    let ck = exp.train(&manifest, DaMode::ActDa, Some(InterferenceKind::Music), Some(&mut log))?;
    println!("trained {} epochs, mode {}", ck.metadata.epochs, ck.metadata.mode);

    let root = std::path::Path::new(".");
    let label = |r: &spkcam::corpus::ManifestRecord| r.speaker.expect("labelled") as usize;
    let clean = manifest
        .targets(Split::Test)
        .map(|r| Ok((exp.features.fbank(&manifest.waveform(&r.key, root)?)?, label(r))))
        .collect::<spkcam::Result<Vec<_>>>()?;
    let noisy = manifest
        .scenario(Scenario::Overlap, InterferenceKind::Music)
        .map(|r| Ok((exp.features.fbank(&manifest.waveform(&r.key, root)?)?, label(r))))
        .collect::<spkcam::Result<Vec<_>>>()?;
    for (name, set) in [("clean", &clean), ("music", &noisy)] {
        let acc = topk_accuracy(&ck.model, set, &[1, 3])?;
        println!("{name:>6}: top-1 {:.3}, top-3 {:.3}", acc[0].1, acc[1].1);
    }
    Ok(())
}
