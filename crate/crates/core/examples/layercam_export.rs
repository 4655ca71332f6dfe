//! Fused LayerCAM saliency of a trained model on a concatenated
//! speech + noise utterance, exported as grid, PGM and CSV files.
//!
//! cargo run --release --example layercam_export -- [OUT_DIR]

use std::fs::File;
use std::path::PathBuf;

use spkcam::augment::DaMode;
use spkcam::config::RunConfig;
use spkcam::corpus::InterferenceKind;
use spkcam::experiment::Experiment;
use spkcam::layercam::{fused_saliency, read_grid, write_csv, write_grid, write_pgm};

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
topk = [1]
";

fn main() -> spkcam::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "saliency-example".into()));
    std::fs::create_dir_all(&out)?;
    let exp = Experiment::new(RunConfig::from_toml(CONFIG)?)?;
    let manifest = exp.synthetic_manifest()?;
    let ck = exp.train(&manifest, DaMode::VanillaDa, Some(InterferenceKind::Noise), None)?;
    let tests = exp.test_sets(&manifest)?;
    let set = tests.kind(InterferenceKind::Noise).expect("noise test set");
    let (fb, labels, speaker) = &set.concat[0];

    let sal = fused_saliency(&ck.model, fb, *speaker)?;
    for (k, stage) in sal.stages.iter().enumerate() {
        let mean = stage.values().iter().sum::<f64>() / stage.values().len() as f64;
        println!("stage {}: mean saliency {mean:.3}", k + 1);
    }
    let speech_frames = labels.count(spkcam::analysis::FrameLabel::TargetSpeech);
    println!("{} frames, first {speech_frames} are target speech", labels.len());
    for (t, row) in [0, labels.len() - 1].iter().map(|&t| (t, sal.fused.row(t))) {
        println!("frame {t:>3}: summed saliency {:.2}", row.iter().sum::<f64>());
    }

    write_grid(&sal.fused, File::create(out.join("fused.grid"))?)?;
    write_pgm(&sal.fused, File::create(out.join("fused.pgm"))?)?;
    write_csv(&sal.fused, File::create(out.join("fused.csv"))?)?;
    let back = read_grid(File::open(out.join("fused.grid"))?)?;
    println!("grid round trip max error {:.2e}", back.l1_distance(&sal.fused)?);
    println!("wrote fused.grid, fused.pgm and fused.csv to {}", out.display());
    Ok(())
}
