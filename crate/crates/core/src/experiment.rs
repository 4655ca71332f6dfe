//! End-to-end runs: corpus, the seven trained models (Base plus Vanilla DA
//! and Act DA for each interference type), and every evaluation protocol,
//! reduced to result tables and trend checks.
//!
//! Result tables are CSV with the columns `table,condition,model,metric,value`
//! and fixed six-decimal formatting, so reruns with one seed compare
//! byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, DeletionPair, OverlapPair, SegmentLabels};
use crate::augment::{self, DaMode, TrainConfig};
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{self, ExperimentManifest, InterferenceKind, Scenario, Source, Split};
use crate::dsp::{FbankMatrix, FeatureExtractor, Waveform};
use crate::error::{Error, Result};
use crate::layercam::fused_saliency;
use crate::net::SpeakerNet;

/// One cell of a result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub table: String,
    pub condition: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    fn new(table: &str, condition: impl Into<String>, model: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        Self {
            table: table.into(),
            condition: condition.into(),
            model: model.into(),
            metric: metric.into(),
            value,
        }
    }
}

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("table,condition,model,metric,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:.6}\n", r.table, r.condition, r.model, r.metric, r.value));
    }
    out
}

/// File name of a checkpoint, e.g. `act_da-speech.ckpt`.
pub fn checkpoint_name(mode: DaMode, kind: Option<InterferenceKind>) -> String {
    match kind {
        Some(k) if mode.uses_interference() => format!("{mode}-{k}.ckpt"),
        _ => format!("{mode}.ckpt"),
    }
}

/// Materialised test material for one interference type.
#[derive(Debug, Clone)]
pub struct InterferenceTestSet {
    pub kind: InterferenceKind,
    pub overlap: Vec<OverlapPair>,
    pub concat: Vec<(FbankMatrix, SegmentLabels, usize)>,
}

#[derive(Debug, Clone)]
pub struct TestSets {
    pub clean: Vec<(FbankMatrix, usize)>,
    pub by_kind: Vec<InterferenceTestSet>,
}

impl TestSets {
    pub fn kind(&self, kind: InterferenceKind) -> Option<&InterferenceTestSet> {
        self.by_kind.iter().find(|s| s.kind == kind)
    }
}

/// The Base model and the DA models, keyed by interference type.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub base: Checkpoint,
    pub vanilla: BTreeMap<InterferenceKind, Checkpoint>,
    pub act: BTreeMap<InterferenceKind, Checkpoint>,
}

impl ModelSet {
    /// `(name, model)` for base, vanilla and act on one interference type.
    pub fn for_kind(&self, kind: InterferenceKind) -> Vec<(&'static str, &SpeakerNet)> {
        let mut out = vec![("base", &self.base.model)];
        if let Some(c) = self.vanilla.get(&kind) {
            out.push(("vanilla_da", &c.model));
        }
        if let Some(c) = self.act.get(&kind) {
            out.push(("act_da", &c.model));
        }
        out
    }
}

/// A directional or exact check over the result tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub id: String,
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub seed: u64,
    pub rows: Vec<ResultRow>,
    pub checks: Vec<TrendCheck>,
}

impl TrendReport {
    pub fn value(&self, table: &str, condition: &str, model: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.table == table && r.condition == condition && r.model == model && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn checks_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {}: {} ({})\n", if c.passed { "PASS" } else { "FAIL" }, c.id, c.description, c.detail))
            .collect()
    }
}

pub struct Experiment {
    pub config: RunConfig,
    pub features: FeatureExtractor,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let features = config.dsp.extractor()?;
        Ok(Self { config, features })
    }

    pub fn synthetic_manifest(&self) -> Result<ExperimentManifest> {
        corpus::build_synthetic_manifest(&self.config.corpus, self.config.seed)
    }

    fn audio_root(&self) -> &Path {
        &self.config.paths.audio_root
    }

    pub fn train_config(&self, mode: DaMode, kind: Option<InterferenceKind>) -> Result<TrainConfig> {
        let mut cfg = self.config.train.clone();
        cfg.mode = mode;
        if mode.uses_interference() {
            cfg.mix.interference = kind.ok_or_else(|| Error::Config(format!("{mode} needs an interference type")))?;
        }
        Ok(cfg)
    }

    pub fn train(
        &self,
        manifest: &ExperimentManifest,
        mode: DaMode,
        kind: Option<InterferenceKind>,
        log: Option<&mut dyn Write>,
    ) -> Result<Checkpoint> {
        let cfg = self.train_config(mode, kind)?;
        let mut model = self.config.model.clone();
        if model.n_speakers != manifest.n_speakers() {
            return Err(Error::ConfigMismatch {
                field: "model.n_speakers",
                expected: manifest.n_speakers().to_string(),
                found: model.n_speakers.to_string(),
            });
        }
        model.n_mels = self.features.n_mels();
        augment::train(manifest, self.audio_root(), &model, &cfg, &self.features, log)
    }

    /// Trains Base and both DA modes for every interference type, writing
    /// checkpoints and training logs under `out` when given.
    pub fn train_all(&self, manifest: &ExperimentManifest, out: Option<&Path>) -> Result<ModelSet> {
        let run = |mode: DaMode, kind: Option<InterferenceKind>| -> Result<Checkpoint> {
            let name = checkpoint_name(mode, kind);
            let mut log_file = match out {
                Some(dir) => {
                    fs::create_dir_all(dir.join("logs"))?;
                    Some(fs::File::create(dir.join("logs").join(name.replace(".ckpt", ".jsonl")))?)
                }
                None => None,
            };
            let ck = self.train(manifest, mode, kind, log_file.as_mut().map(|f| f as &mut dyn Write))?;
            if let Some(dir) = out {
                fs::create_dir_all(dir.join("checkpoints"))?;
                checkpoint::save_checkpoint(&ck, dir.join("checkpoints").join(&name))?;
            }
            Ok(ck)
        };
        let mut jobs = vec![(DaMode::Base, None)];
        for kind in InterferenceKind::ALL {
            jobs.push((DaMode::VanillaDa, Some(kind)));
            jobs.push((DaMode::ActDa, Some(kind)));
        }
        let mut trained = parallel_map(&jobs, |&(mode, kind)| run(mode, kind)).into_iter();
        let base = trained.next().expect("base job")?;
        let mut vanilla = BTreeMap::new();
        let mut act = BTreeMap::new();
        for kind in InterferenceKind::ALL {
            vanilla.insert(kind, trained.next().expect("vanilla job")?);
            act.insert(kind, trained.next().expect("act job")?);
        }
        Ok(ModelSet { base, vanilla, act })
    }

    fn limit<T>(&self, items: Vec<T>) -> Vec<T> {
        match self.config.analysis.max_test_utterances {
            0 => items,
            n => items.into_iter().take(n).collect(),
        }
    }

    /// Materialises the clean, overlap and concatenation test sets.
    pub fn test_sets(&self, manifest: &ExperimentManifest) -> Result<TestSets> {
        let root = self.audio_root();
        let clean_records: Vec<_> = manifest.targets(Split::Test).collect();
        let clean = self.limit(clean_records)
            .into_iter()
            .map(|r| Ok((self.features.fbank(&manifest.waveform(&r.key, root)?)?, speaker(r)?)))
            .collect::<Result<Vec<_>>>()?;
        if clean.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let mut by_kind = Vec::new();
        for kind in InterferenceKind::ALL {
            let overlap = self
                .limit(manifest.scenario(Scenario::Overlap, kind).collect())
                .into_iter()
                .map(|r| {
                    let Source::Mixture { target, .. } = &r.source else {
                        return Err(Error::Manifest(format!("{}: overlap record without mixture source", r.key)));
                    };
                    Ok(OverlapPair {
                        clean: manifest.waveform(target, root)?,
                        mixture: manifest.waveform(&r.key, root)?,
                        speaker: speaker(r)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let concat = self
                .limit(manifest.scenario(Scenario::Concat, kind).collect())
                .into_iter()
                .map(|r| {
                    let Source::Mixture { target, interference } = &r.source else {
                        return Err(Error::Manifest(format!("{}: concat record without mixture source", r.key)));
                    };
                    let t = manifest.waveform(target, root)?;
                    let total = manifest.waveform(&r.key, root)?.len();
                    let n = augment::fit_length(&manifest.waveform(interference, root)?, total - t.len(), 0)?;
                    let (joined, labels) = corpus::build_concat(&t, &n, self.features.stft_config())?;
                    Ok((self.features.fbank(&joined)?, labels, speaker(r)?))
                })
                .collect::<Result<Vec<_>>>()?;
            by_kind.push(InterferenceTestSet { kind, overlap, concat });
        }
        Ok(TestSets { clean, by_kind })
    }

    fn fbanks(&self, waves: impl Iterator<Item = (Waveform, usize)>) -> Result<Vec<(FbankMatrix, usize)>> {
        waves.map(|(w, s)| Ok((self.features.fbank(&w)?, s))).collect()
    }

    /// Top-k accuracy on clean test speech and on each overlap set.
    pub fn accuracy_rows(&self, name: &str, model: &SpeakerNet, tests: &TestSets, kinds: &[InterferenceKind]) -> Result<Vec<ResultRow>> {
        let ks = &self.config.analysis.topk;
        let mut rows = Vec::new();
        for (k, acc) in analysis::topk_accuracy(model, &tests.clean, ks)? {
            rows.push(ResultRow::new("accuracy", "clean", name, format!("top{k}"), acc));
        }
        for &kind in kinds {
            let set = tests.kind(kind).ok_or(Error::EmptyTestSet)?;
            let items = self.fbanks(set.overlap.iter().map(|p| (p.mixture.clone(), p.speaker)))?;
            for (k, acc) in analysis::topk_accuracy(model, &items, ks)? {
                rows.push(ResultRow::new("accuracy", kind.to_string(), name, format!("top{k}"), acc));
            }
        }
        Ok(rows)
    }

    /// Mean SPR and IPR over the concatenated test utterances.
    pub fn retention_rows(&self, name: &str, model: &SpeakerNet, set: &InterferenceTestSet) -> Result<Vec<ResultRow>> {
        if set.concat.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let threshold = self.config.frame_threshold();
        let (mut spr, mut ipr, mut n_spr, mut n_ipr) = (0.0, 0.0, 0usize, 0usize);
        for (fb, labels, speaker) in &set.concat {
            let map = fused_saliency(model, fb, *speaker)?.fused;
            let r = analysis::spr_ipr(&map, labels, threshold)?;
            if let Some(v) = r.spr {
                spr += v;
                n_spr += 1;
            }
            if let Some(v) = r.ipr {
                ipr += v;
                n_ipr += 1;
            }
        }
        let kind = set.kind.to_string();
        Ok(vec![
            ResultRow::new("retention", &kind, name, "spr", spr / n_spr.max(1) as f64),
            ResultRow::new("retention", &kind, name, "ipr", ipr / n_ipr.max(1) as f64),
        ])
    }

    pub fn denoise_rows(&self, models: &[(&str, &SpeakerNet)], set: &InterferenceTestSet) -> Result<Vec<ResultRow>> {
        let table = analysis::denoise_eval(models, &set.overlap, &self.features)?;
        Ok(table
            .rows
            .into_iter()
            .map(|(model, snr)| ResultRow::new("denoise", set.kind.to_string(), model, "snr_db", snr))
            .collect())
    }

    pub fn deletion_pairs(&self, set: &InterferenceTestSet) -> Result<Vec<DeletionPair>> {
        set.overlap
            .iter()
            .map(|p| {
                Ok(DeletionPair {
                    clean: self.features.fbank(&p.clean)?,
                    noisy: self.features.fbank(&p.mixture)?,
                    speaker: p.speaker,
                })
            })
            .collect()
    }

    /// Deletion curve rows (one per threshold) plus the AUC.
    pub fn deletion_rows(&self, name: &str, saliency: &SpeakerNet, judge: &SpeakerNet, kind: InterferenceKind, pairs: &[DeletionPair]) -> Result<Vec<ResultRow>> {
        let thresholds = analysis::threshold_grid(self.config.analysis.deletion_thresholds);
        let curve = analysis::deletion_test(saliency, judge, pairs, &thresholds)?;
        let cond = kind.to_string();
        let mut rows: Vec<ResultRow> = curve
            .points
            .iter()
            .flat_map(|p| {
                [
                    ResultRow::new("deletion", &cond, name, format!("top1@{:.2}", p.threshold), p.top1_accuracy),
                    ResultRow::new("deletion", &cond, name, format!("masked@{:.2}", p.threshold), p.masked_fraction),
                ]
            })
            .collect();
        rows.push(ResultRow::new("deletion", &cond, name, "auc", curve.auc));
        Ok(rows)
    }

    /// Every table for a trained model set.
    pub fn evaluate(&self, models: &ModelSet, tests: &TestSets) -> Result<Vec<ResultRow>> {
        let mut rows = self.accuracy_rows("base", &models.base.model, tests, &InterferenceKind::ALL)?;
        for kind in InterferenceKind::ALL {
            for (name, ck) in [("vanilla_da", models.vanilla.get(&kind)), ("act_da", models.act.get(&kind))] {
                if let Some(ck) = ck {
                    rows.extend(
                        self.accuracy_rows(name, &ck.model, tests, &[kind])?
                            .into_iter()
                            .map(|mut r| {
                                if r.condition == "clean" {
                                    r.condition = format!("clean/{kind}");
                                }
                                r
                            }),
                    );
                }
            }
        }
        let per_kind = parallel_map(&tests.by_kind, |set| -> Result<Vec<ResultRow>> {
            let named = models.for_kind(set.kind);
            let mut rows = Vec::new();
            for (name, model) in &named {
                rows.extend(self.retention_rows(name, model, set)?);
            }
            rows.extend(self.denoise_rows(&named, set)?);
            let pairs = self.deletion_pairs(set)?;
            for (name, model) in &named {
                rows.extend(self.deletion_rows(name, model, &models.base.model, set.kind, &pairs)?);
            }
            Ok(rows)
        });
        for r in per_kind {
            rows.extend(r?);
        }
        Ok(rows)
    }

    /// Corpus, training, evaluation and trend checks. With `out`, writes the
    /// manifest, checkpoints, training logs, `results.csv`, `summary.json`
    /// and `checks.txt` below it.
    pub fn reproduce(&self, out: Option<&Path>) -> Result<TrendReport> {
        let manifest = self.synthetic_manifest()?;
        if let Some(dir) = out {
            fs::create_dir_all(dir.join("corpus"))?;
            manifest.save(dir.join("corpus").join("manifest.jsonl"))?;
        }
        let models = self.train_all(&manifest, out)?;
        let tests = self.test_sets(&manifest)?;
        let rows = self.evaluate(&models, &tests)?;
        let report = TrendReport {
            seed: self.config.seed,
            checks: trend_checks(&rows),
            rows,
        };
        if let Some(dir) = out {
            write_report(&report, dir)?;
        }
        Ok(report)
    }
}

/// Applies `f` to every item on up to `available_parallelism` threads and
/// returns the results in input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

fn speaker(r: &corpus::ManifestRecord) -> Result<usize> {
    r.speaker
        .map(|s| s as usize)
        .ok_or_else(|| Error::Manifest(format!("{}: no speaker label", r.key)))
}

pub fn write_report(report: &TrendReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), report.to_csv())?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(dir.join("checks.txt"), report.checks_text())?;
    Ok(())
}

/// Paths of the byte-comparable outputs of [`write_report`].
pub fn report_files(dir: &Path) -> Vec<PathBuf> {
    ["results.csv", "summary.json", "checks.txt"].iter().map(|f| dir.join(f)).collect()
}

fn find(rows: &[ResultRow], table: &str, condition: &str, model: &str, metric: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.table == table && r.condition == condition && r.model == model && r.metric == metric)
        .map(|r| r.value)
}

/// Minimum top-1 gain of Vanilla DA over Base on interfered speech, in
/// absolute accuracy.
pub const MIN_DA_GAIN: f64 = 0.15;
/// Allowed shortfall of Act DA behind Vanilla DA on speech interference.
pub const ACT_TIE_TOLERANCE: f64 = 0.01;
pub const MIN_CLEAN_TOP1: f64 = 0.90;
pub const MIN_SPR: f64 = 0.8;

/// Directional checks over a full set of result rows.
pub fn trend_checks(rows: &[ResultRow]) -> Vec<TrendCheck> {
    let get = |t: &str, c: &str, m: &str, k: &str| find(rows, t, c, m, k).unwrap_or(f64::NAN);
    let mut checks = Vec::new();
    let mut push = |id: &str, description: String, passed: bool, detail: String| {
        checks.push(TrendCheck {
            id: id.into(),
            description,
            passed,
            detail,
        })
    };

    let clean = get("accuracy", "clean", "base", "top1");
    push("accuracy.clean", format!("base clean top-1 >= {MIN_CLEAN_TOP1}"), clean >= MIN_CLEAN_TOP1, format!("{clean:.4}"));
    for kind in InterferenceKind::ALL {
        let k = kind.to_string();
        let (b, v) = (get("accuracy", &k, "base", "top1"), get("accuracy", &k, "vanilla_da", "top1"));
        push(
            &format!("accuracy.{k}"),
            format!("vanilla_da top-1 exceeds base by >= {MIN_DA_GAIN} on {k}"),
            v - b >= MIN_DA_GAIN,
            format!("base {b:.4}, vanilla_da {v:.4}"),
        );
    }
    let (v, a) = (get("accuracy", "speech", "vanilla_da", "top1"), get("accuracy", "speech", "act_da", "top1"));
    push(
        "accuracy.speech.act",
        "act_da top-1 >= vanilla_da top-1 on speech (1 point tolerance)".into(),
        a >= v - ACT_TIE_TOLERANCE,
        format!("vanilla_da {v:.4}, act_da {a:.4}"),
    );

    let models = ["base", "vanilla_da", "act_da"];
    for kind in InterferenceKind::ALL {
        let k = kind.to_string();
        let ipr: Vec<f64> = models.iter().map(|m| get("retention", &k, m, "ipr")).collect();
        push(
            &format!("retention.{k}"),
            format!("ipr of both DA models below base on {k}"),
            ipr[1] < ipr[0] && ipr[2] < ipr[0],
            format!("base {:.4}, vanilla_da {:.4}, act_da {:.4}", ipr[0], ipr[1], ipr[2]),
        );
    }
    let (vi, ai) = (get("retention", "speech", "vanilla_da", "ipr"), get("retention", "speech", "act_da", "ipr"));
    push("retention.speech.act", "act_da ipr <= vanilla_da ipr on speech".into(), ai <= vi, format!("vanilla_da {vi:.4}, act_da {ai:.4}"));
    let min_spr = rows
        .iter()
        .filter(|r| r.table == "retention" && r.metric == "spr")
        .map(|r| r.value)
        .fold(f64::INFINITY, f64::min);
    push("retention.spr", format!("every spr >= {MIN_SPR}"), min_spr >= MIN_SPR, format!("min {min_spr:.4}"));

    for kind in InterferenceKind::ALL {
        let k = kind.to_string();
        let n = get("denoise", &k, analysis::NOISY_CONDITION, "snr_db");
        let b = get("denoise", &k, "base", "snr_db");
        let v = get("denoise", &k, "vanilla_da", "snr_db");
        let a = get("denoise", &k, "act_da", "snr_db");
        push(
            &format!("denoise.{k}"),
            format!("snr noisy < base < both DA models on {k}"),
            n < b && b < v && b < a,
            format!("noisy {n:.3}, base {b:.3}, vanilla_da {v:.3}, act_da {a:.3} dB"),
        );
    }
    let (v, a) = (get("denoise", "speech", "vanilla_da", "snr_db"), get("denoise", "speech", "act_da", "snr_db"));
    push("denoise.speech.act", "act_da snr >= vanilla_da snr on speech".into(), a >= v, format!("vanilla_da {v:.3}, act_da {a:.3} dB"));

    for kind in InterferenceKind::ALL {
        let k = kind.to_string();
        let auc: Vec<f64> = models.iter().map(|m| get("deletion", &k, m, "auc")).collect();
        push(
            &format!("deletion.{k}"),
            format!("deletion auc of both DA saliency models below base on {k}"),
            auc[1] < auc[0] && auc[2] < auc[0],
            format!("base {:.4}, vanilla_da {:.4}, act_da {:.4}", auc[0], auc[1], auc[2]),
        );
    }
    let (v, a) = (get("deletion", "speech", "vanilla_da", "auc"), get("deletion", "speech", "act_da", "auc"));
    push("deletion.speech.act", "act_da deletion auc <= vanilla_da on speech".into(), a <= v, format!("vanilla_da {v:.4}, act_da {a:.4}"));
    for kind in InterferenceKind::ALL {
        let k = kind.to_string();
        let unmasked = get("accuracy", "clean", "base", "top1");
        let at_zero: Vec<f64> = models.iter().map(|m| get("deletion", &k, m, "top1@0.00")).collect();
        push(
            &format!("deletion.{k}.unmasked"),
            "deletion accuracy at threshold 0 equals the judge's clean accuracy".into(),
            at_zero.iter().all(|&a| a == unmasked),
            format!("judge {unmasked:.4}, threshold 0: {at_zero:?}"),
        );
    }
    checks
}
