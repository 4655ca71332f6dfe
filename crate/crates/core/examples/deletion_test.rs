//! Deletion test: clean speech loses the time-frequency cells that a noisy
//! input's saliency ranks low, and a clean-trained judge classifies what is
//! left. Prints the accuracy curve and its AUC for two saliency models.
//!
//! cargo run --release --example deletion_test

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
deletion_thresholds = 11
";

fn main() -> spkcam::Result<()> {
    let exp = Experiment::new(RunConfig::from_toml(CONFIG)?)?;
    let manifest = exp.synthetic_manifest()?;
    let kind = InterferenceKind::Music;
    let judge = exp.train(&manifest, DaMode::Base, None, None)?;
    let da = exp.train(&manifest, DaMode::VanillaDa, Some(kind), None)?;
    let tests = exp.test_sets(&manifest)?;
    let pairs = exp.deletion_pairs(tests.kind(kind).expect("music test set"))?;
    for (name, model) in [("base", &judge.model), ("vanilla_da", &da.model)] {
        println!("saliency from {name}:");
        for row in exp.deletion_rows(name, model, &judge.model, kind, &pairs)? {
            if !row.metric.starts_with("masked") {
                println!("  {:>10} {:.3}", row.metric, row.value);
            }
        }
    }
    Ok(())
}
