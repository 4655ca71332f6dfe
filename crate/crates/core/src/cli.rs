//! Command-line front end. Every command reads one config file (or the
//! defaults), writes only below the results directory, records provenance
//! there and holds a lock file while it runs.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 runtime failure,
//! 4 failed trend assertion. Errors are printed to stderr as one JSON line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::augment::DaMode;
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{ExperimentManifest, InterferenceKind, Split};
use crate::error::{Error, Result};
use crate::experiment::{self, checkpoint_name, rows_to_csv, Experiment, ResultRow};
use crate::layercam::{self, fused_saliency};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_ASSERTION: i32 = 4;

pub const LOCK_FILE: &str = ".spkcam.lock";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "spkcam", version, about = "Saliency analysis of data-augmented speaker-ID CNNs")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the global seed of the config.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides the results directory of the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesises the corpus and writes corpus/manifest.jsonl.
    Corpus,
    /// Trains one model and writes its checkpoint and training log.
    Train(ModelArgs),
    /// Top-k accuracy of a trained model on clean and interfered test speech.
    Eval(ModelArgs),
    /// Exports fused LayerCAM maps for every test utterance.
    Saliency(SaliencyArgs),
    /// Runs one analysis protocol.
    Analyze {
        #[command(subcommand)]
        protocol: Protocol,
    },
    /// Corpus, all seven models, every analysis, then the trend checks.
    ReproducePaperTrends,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "base")]
    pub mode: DaMode,
    /// Interference type; required for the DA modes.
    #[arg(long)]
    pub interference: Option<InterferenceKind>,
}

#[derive(Debug, Clone, Args)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Export formats; repeat the flag for several.
    #[arg(long, value_enum, default_values = ["grid", "pgm"])]
    pub format: Vec<ExportFormat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Grid,
    Pgm,
    Csv,
}

impl ExportFormat {
    fn extension(self) -> &'static str {
        match self {
            ExportFormat::Grid => "grid",
            ExportFormat::Pgm => "pgm",
            ExportFormat::Csv => "csv",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Protocol {
    /// Speech and interference preservation ratios on concatenated speech.
    SprIpr(RequiredKind),
    /// SNR of saliency-masked resynthesis for every model of one interference type.
    Denoise {
        #[arg(long)]
        interference: InterferenceKind,
    },
    /// Deletion curve and AUC with the base model as judge.
    Deletion(RequiredKind),
}

#[derive(Debug, Clone, Args)]
pub struct RequiredKind {
    #[arg(long, default_value = "base")]
    pub mode: DaMode,
    #[arg(long)]
    pub interference: InterferenceKind,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind, "code": self.code, "message": self.message }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match e {
            Error::Config(_) | Error::ConfigMismatch { .. } => (EXIT_CONFIG, "config"),
            _ => (EXIT_RUNTIME, "runtime"),
        };
        CliError {
            code,
            kind,
            message: e.to_string().replace('\n', " "),
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Normal output goes to `stdout`, the JSON
/// error line to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            let err = CliError {
                code: EXIT_CONFIG,
                kind: "usage",
                message: first.trim_start_matches("error: ").to_string(),
            };
            let _ = writeln!(stderr, "{}", err.to_json());
            return err.code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            let _ = writeln!(stderr, "{}", err.to_json());
            err.code
        }
    }
}

pub fn run_from_env() -> i32 {
    run(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
}

/// Effective configuration after applying the global flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_toml("")?,
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths.results = out.clone();
    }
    Ok(cfg)
}

/// Exclusive ownership of a results directory; released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(results: &Path) -> Result<Self> {
        fs::create_dir_all(results)?;
        let path = results.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(results.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    command: String,
    seed: u64,
    config_file: Option<String>,
    config: &'a str,
}

fn command_label(command: &Command) -> String {
    match command {
        Command::Corpus => "corpus".into(),
        Command::Train(m) => format!("train {}", model_label(m)),
        Command::Eval(m) => format!("eval {}", model_label(m)),
        Command::Saliency(s) => format!("saliency {}", model_label(&s.model)),
        Command::Analyze { protocol } => match protocol {
            Protocol::SprIpr(r) => format!("analyze spr-ipr --mode {} --interference {}", r.mode, r.interference),
            Protocol::Denoise { interference } => format!("analyze denoise --interference {interference}"),
            Protocol::Deletion(r) => format!("analyze deletion --mode {} --interference {}", r.mode, r.interference),
        },
        Command::ReproducePaperTrends => "reproduce-paper-trends".into(),
    }
}

fn model_label(m: &ModelArgs) -> String {
    match m.interference {
        Some(k) => format!("--mode {} --interference {k}", m.mode),
        None => format!("--mode {}", m.mode),
    }
}

fn write_provenance(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_toml();
    let record = Provenance {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: command_label(&cli.command),
        seed: cfg.seed,
        config_file: cli.config.as_ref().map(|p| p.display().to_string()),
        config: &text,
    };
    let dir = &cfg.paths.results;
    fs::write(dir.join(CONFIG_COPY), &text)?;
    fs::write(dir.join(PROVENANCE_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

fn execute(cli: &Cli, stdout: &mut dyn Write) -> std::result::Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    let results = cfg.paths.results.clone();
    let _lock = RunLock::acquire(&results)?;
    write_provenance(cli, &cfg)?;
    let exp = Experiment::new(cfg)?;
    match &cli.command {
        Command::Corpus => cmd_corpus(&exp, stdout)?,
        Command::Train(m) => cmd_train(&exp, m, stdout)?,
        Command::Eval(m) => cmd_eval(&exp, m, stdout)?,
        Command::Saliency(s) => cmd_saliency(&exp, s, stdout)?,
        Command::Analyze { protocol } => cmd_analyze(&exp, protocol, stdout)?,
        Command::ReproducePaperTrends => return cmd_reproduce(&exp, stdout),
    }
    Ok(())
}

fn results_dir(exp: &Experiment) -> &Path {
    &exp.config.paths.results
}

fn checkpoint_path(exp: &Experiment, mode: DaMode, kind: Option<InterferenceKind>) -> PathBuf {
    exp.config.checkpoint_dir().join(checkpoint_name(mode, kind))
}

fn stem(mode: DaMode, kind: Option<InterferenceKind>) -> String {
    checkpoint_name(mode, kind).trim_end_matches(".ckpt").to_string()
}

fn require_kind(m: &ModelArgs) -> Result<Option<InterferenceKind>> {
    if m.mode.uses_interference() && m.interference.is_none() {
        return Err(Error::Config(format!("--mode {} requires --interference", m.mode)));
    }
    Ok(if m.mode.uses_interference() { m.interference } else { None })
}

fn load_manifest(exp: &Experiment) -> Result<ExperimentManifest> {
    let path = exp.config.manifest_path();
    if !path.exists() {
        return Err(Error::MissingInput {
            path,
            hint: "run `spkcam corpus` first",
        });
    }
    ExperimentManifest::load(path)
}

fn load_model(exp: &Experiment, mode: DaMode, kind: Option<InterferenceKind>) -> Result<Checkpoint> {
    let path = checkpoint_path(exp, mode, kind);
    if !path.exists() {
        return Err(Error::MissingInput {
            path,
            hint: "train this model first",
        });
    }
    checkpoint::load_checkpoint_expecting(path, exp.features.n_mels())
}

fn write_table(exp: &Experiment, name: &str, rows: &[ResultRow], stdout: &mut dyn Write) -> Result<PathBuf> {
    let dir = results_dir(exp).join("tables");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{name}.csv"));
    let csv = rows_to_csv(rows);
    fs::write(&path, &csv)?;
    write!(stdout, "{csv}")?;
    Ok(path)
}

fn cmd_corpus(exp: &Experiment, stdout: &mut dyn Write) -> Result<()> {
    let manifest = exp.synthetic_manifest()?;
    let path = exp.config.manifest_path();
    fs::create_dir_all(path.parent().expect("manifest path has a parent"))?;
    manifest.save(&path)?;
    writeln!(
        stdout,
        "wrote {} ({} records, {} speakers)",
        path.display(),
        manifest.records().len(),
        manifest.n_speakers()
    )?;
    Ok(())
}

fn cmd_train(exp: &Experiment, m: &ModelArgs, stdout: &mut dyn Write) -> Result<()> {
    let kind = require_kind(m)?;
    let manifest = load_manifest(exp)?;
    let logs = results_dir(exp).join("logs");
    fs::create_dir_all(&logs)?;
    let mut log = fs::File::create(logs.join(format!("{}.jsonl", stem(m.mode, kind))))?;
    let ck = exp.train(&manifest, m.mode, kind, Some(&mut log))?;
    let path = checkpoint_path(exp, m.mode, kind);
    fs::create_dir_all(exp.config.checkpoint_dir())?;
    checkpoint::save_checkpoint(&ck, &path)?;
    writeln!(stdout, "wrote {}", path.display())?;
    Ok(())
}

fn cmd_eval(exp: &Experiment, m: &ModelArgs, stdout: &mut dyn Write) -> Result<()> {
    let kind = require_kind(m)?;
    let manifest = load_manifest(exp)?;
    let ck = load_model(exp, m.mode, kind)?;
    let tests = exp.test_sets(&manifest)?;
    let kinds: Vec<InterferenceKind> = match kind {
        Some(k) => vec![k],
        None => InterferenceKind::ALL.to_vec(),
    };
    let rows = exp.accuracy_rows(&m.mode.to_string(), &ck.model, &tests, &kinds)?;
    write_table(exp, &format!("accuracy-{}", stem(m.mode, kind)), &rows, stdout)?;
    Ok(())
}

fn cmd_saliency(exp: &Experiment, s: &SaliencyArgs, stdout: &mut dyn Write) -> Result<()> {
    let kind = require_kind(&s.model)?;
    let manifest = load_manifest(exp)?;
    let ck = load_model(exp, s.model.mode, kind)?;
    let root = &exp.config.paths.audio_root;
    let mut records: Vec<_> = manifest.targets(Split::Test).collect();
    if let Some(k) = kind {
        records.extend(manifest.scenario(crate::corpus::Scenario::Overlap, k));
    }
    let cap = exp.config.analysis.max_test_utterances;
    let dir = results_dir(exp).join("saliency").join(stem(s.model.mode, kind));
    let mut formats = s.format.clone();
    formats.dedup();
    let mut written = 0usize;
    let mut per_group = std::collections::BTreeMap::<String, usize>::new();
    for r in records {
        let group = r.key.rsplit_once('/').map(|(g, _)| g.to_string()).unwrap_or_default();
        let count = per_group.entry(group).or_default();
        if cap > 0 && *count >= cap {
            continue;
        }
        *count += 1;
        let speaker = r
            .speaker
            .ok_or_else(|| Error::Manifest(format!("{}: no speaker label", r.key)))? as usize;
        let fb = exp.features.fbank(&manifest.waveform(&r.key, root)?)?;
        let map = fused_saliency(&ck.model, &fb, speaker)?.fused;
        for &f in &formats {
            let path = dir.join(format!("{}.{}", r.key, f.extension()));
            fs::create_dir_all(path.parent().expect("export path has a parent"))?;
            let file = std::io::BufWriter::new(fs::File::create(&path)?);
            match f {
                ExportFormat::Grid => layercam::write_grid(&map, file)?,
                ExportFormat::Pgm => layercam::write_pgm(&map, file)?,
                ExportFormat::Csv => layercam::write_csv(&map, file)?,
            }
            written += 1;
        }
    }
    writeln!(stdout, "wrote {written} files below {}", dir.display())?;
    Ok(())
}

fn cmd_analyze(exp: &Experiment, protocol: &Protocol, stdout: &mut dyn Write) -> Result<()> {
    let manifest = load_manifest(exp)?;
    let tests = exp.test_sets(&manifest)?;
    let set_for = |k: InterferenceKind| tests.kind(k).ok_or(Error::EmptyTestSet);
    match protocol {
        Protocol::SprIpr(r) => {
            let kind = model_kind(r);
            let ck = load_model(exp, r.mode, kind)?;
            let rows = exp.retention_rows(&r.mode.to_string(), &ck.model, set_for(r.interference)?)?;
            write_table(exp, &format!("retention-{}-{}", stem(r.mode, kind), r.interference), &rows, stdout)?;
        }
        Protocol::Denoise { interference } => {
            let mut loaded = Vec::new();
            for mode in DaMode::ALL {
                let kind = mode.uses_interference().then_some(*interference);
                if checkpoint_path(exp, mode, kind).exists() {
                    loaded.push((mode.to_string(), load_model(exp, mode, kind)?));
                }
            }
            if loaded.is_empty() {
                return Err(Error::MissingInput {
                    path: exp.config.checkpoint_dir(),
                    hint: "train at least one model first",
                });
            }
            let models: Vec<(&str, &crate::net::SpeakerNet)> =
                loaded.iter().map(|(n, ck)| (n.as_str(), &ck.model)).collect();
            let rows = exp.denoise_rows(&models, set_for(*interference)?)?;
            write_table(exp, &format!("denoise-{interference}"), &rows, stdout)?;
        }
        Protocol::Deletion(r) => {
            let kind = model_kind(r);
            let ck = load_model(exp, r.mode, kind)?;
            let judge = load_model(exp, DaMode::Base, None)?;
            let set = set_for(r.interference)?;
            let pairs = exp.deletion_pairs(set)?;
            let rows = exp.deletion_rows(&r.mode.to_string(), &ck.model, &judge.model, r.interference, &pairs)?;
            write_table(exp, &format!("deletion-{}-{}", stem(r.mode, kind), r.interference), &rows, stdout)?;
        }
    }
    Ok(())
}

fn model_kind(r: &RequiredKind) -> Option<InterferenceKind> {
    r.mode.uses_interference().then_some(r.interference)
}

fn cmd_reproduce(exp: &Experiment, stdout: &mut dyn Write) -> std::result::Result<(), CliError> {
    let dir = results_dir(exp).to_path_buf();
    let report = exp.reproduce(Some(&dir))?;
    write!(stdout, "{}", report.checks_text()).map_err(Error::from)?;
    for path in experiment::report_files(&dir) {
        writeln!(stdout, "wrote {}", path.display()).map_err(Error::from)?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.id.as_str()).collect();
        Err(CliError {
            code: EXIT_ASSERTION,
            kind: "assertion",
            message: format!("trend checks failed: {}", failed.join(", ")),
        })
    }
}
