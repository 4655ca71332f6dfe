mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spkcam::augment::DaMode;
use spkcam::checkpoint::load_checkpoint;
use spkcam::cli::{EXIT_CONFIG, EXIT_RUNTIME, LOCK_FILE, PROVENANCE_FILE};
use spkcam::corpus::{ExperimentManifest, InterferenceKind, Split};

fn spkcam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spkcam")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    results: PathBuf,
}

impl Run {
    fn new(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        fs::write(&config, common::tiny_run_config(seed).to_toml()).unwrap();
        let results = dir.path().join("results");
        Self { _dir: dir, config, results }
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", self.config.to_str().unwrap()];
        all.extend_from_slice(args);
        spkcam(&all)
    }
}

fn csv_value(path: &Path, condition: &str, model: &str, metric: &str) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|f| f[1] == condition && f[2] == model && f[3] == metric)
        .unwrap_or_else(|| panic!("{condition}/{model}/{metric} missing in {}", path.display()))[4]
        .parse()
        .unwrap()
}

#[test]
fn default_corpus_has_sixteen_speakers_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&spkcam(&["--out", d.path().to_str().unwrap(), "--seed", "3", "corpus"]));
    }
    let path = |d: &tempfile::TempDir| d.path().join("corpus").join("manifest.jsonl");
    assert_eq!(fs::read(path(&a)).unwrap(), fs::read(path(&b)).unwrap());
    let manifest = ExperimentManifest::load(path(&a)).unwrap();
    assert_eq!(manifest.n_speakers(), 16);
    let provenance: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join(PROVENANCE_FILE)).unwrap()).unwrap();
    assert_eq!(provenance["seed"], 3);
    assert_eq!(provenance["command"], "corpus");
    assert!(!a.path().join(LOCK_FILE).exists());
}

#[test]
fn invalid_interference_in_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[train.mix]\ninterference = \"thunder\"\n").unwrap();
    let out = spkcam(&["--config", config.to_str().unwrap(), "corpus"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("interference"), "{v}");
}

#[test]
fn locked_results_directory_is_refused() {
    let run = Run::new(0);
    fs::create_dir_all(&run.results).unwrap();
    fs::write(run.results.join(LOCK_FILE), "1\n").unwrap();
    let out = run.run(&["corpus"]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn pipeline_commands_agree() {
    let run = Run::new(1);
    ok(&run.run(&["corpus"]));
    ok(&run.run(&["train", "--mode", "base"]));
    ok(&run.run(&["train", "--mode", "act_da", "--interference", "speech"]));

    let ckpt = |name: &str| run.results.join("checkpoints").join(name);
    let base = load_checkpoint(ckpt("base.ckpt")).unwrap();
    assert_eq!(base.metadata.mode, DaMode::Base);
    let act = load_checkpoint(ckpt("act_da-speech.ckpt")).unwrap();
    assert_eq!(act.metadata.mode, DaMode::ActDa);
    assert_eq!(act.metadata.interference, Some(InterferenceKind::Speech));
    let log = fs::read_to_string(run.results.join("logs").join("act_da-speech.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let again = Run::new(1);
    ok(&again.run(&["corpus"]));
    ok(&again.run(&["train", "--mode", "base"]));
    assert_eq!(
        fs::read(ckpt("base.ckpt")).unwrap(),
        fs::read(again.results.join("checkpoints").join("base.ckpt")).unwrap()
    );

    ok(&run.run(&["eval", "--mode", "base"]));
    let tables = run.results.join("tables");
    let clean_top1 = csv_value(&tables.join("accuracy-base.csv"), "clean", "base", "top1");

    ok(&run.run(&["analyze", "deletion", "--mode", "base", "--interference", "noise"]));
    let at_zero = csv_value(&tables.join("deletion-base-noise.csv"), "noise", "base", "top1@0.00");
    assert_eq!(at_zero, clean_top1);

    ok(&run.run(&["analyze", "spr-ipr", "--mode", "act_da", "--interference", "speech"]));
    let spr = csv_value(&tables.join("retention-act_da-speech-speech.csv"), "speech", "act_da", "spr");
    assert!((0.0..=1.0).contains(&spr));

    ok(&run.run(&["analyze", "denoise", "--interference", "speech"]));
    let denoise = fs::read_to_string(tables.join("denoise-speech.csv")).unwrap();
    for model in ["noisy", "base", "act_da"] {
        assert!(denoise.contains(&format!(",{model},snr_db,")), "{denoise}");
    }

    ok(&run.run(&["saliency", "--mode", "base"]));
    let manifest = ExperimentManifest::load(run.results.join("corpus").join("manifest.jsonl")).unwrap();
    let dir = run.results.join("saliency").join("base");
    let tests: Vec<_> = manifest.targets(Split::Test).collect();
    assert!(!tests.is_empty());
    for r in &tests {
        for ext in ["grid", "pgm"] {
            assert!(dir.join(format!("{}.{ext}", r.key)).is_file(), "{} {ext}", r.key);
        }
        let map = spkcam::layercam::read_grid(fs::File::open(dir.join(format!("{}.grid", r.key))).unwrap()).unwrap();
        assert_eq!(map.target_class(), r.speaker.unwrap() as usize);
    }
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let run = Run::new(2);
    ok(&run.run(&["corpus"]));
    let out = run.run(&["eval", "--mode", "vanilla_da", "--interference", "music"]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(v["message"].as_str().unwrap().contains("vanilla_da-music.ckpt"));
}
