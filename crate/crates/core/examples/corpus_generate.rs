//! Builds the synthetic corpus manifest, writes it as JSONL and renders a
//! few of its recordings to WAV.
//!
//! cargo run --release --example corpus_generate -- [OUT_DIR]

use std::path::PathBuf;

use spkcam::corpus::{build_synthetic_manifest, CorpusConfig, InterferenceKind, Scenario, Split};
use spkcam::wav::write_wav;

fn main() -> spkcam::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "corpus-example".into()));
    std::fs::create_dir_all(&out)?;
    let manifest = build_synthetic_manifest(&CorpusConfig::default(), 0)?;
    manifest.save(out.join("manifest.jsonl"))?;

    let train = manifest.targets(Split::Train).count();
    let test = manifest.targets(Split::Test).count();
    println!("{} speakers, {train} train / {test} test utterances", manifest.n_speakers());
    for kind in InterferenceKind::ALL {
        let clips = manifest.interference_clips(kind, Split::Train).count();
        let overlap = manifest.scenario(Scenario::Overlap, kind).count();
        let concat = manifest.scenario(Scenario::Concat, kind).count();
        println!("{kind:>6}: {clips} training clips, {overlap} overlap and {concat} concatenated test items");
    }

    let root = std::path::Path::new(".");
    let picks = [
        manifest.targets(Split::Test).next(),
        manifest.scenario(Scenario::Overlap, InterferenceKind::Speech).next(),
        manifest.scenario(Scenario::Concat, InterferenceKind::Music).next(),
    ];
    for record in picks.into_iter().flatten() {
        let path = out.join(format!("{}.wav", record.key.replace('/', "_")));
        write_wav(&path, &manifest.waveform(&record.key, root)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
