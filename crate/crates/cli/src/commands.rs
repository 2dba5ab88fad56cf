//! One function per pipeline stage. Stages communicate only through files
//! under the configured directories.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use leadi_core::dataio::{parse_label_table, read_wfdb_record, split_by_patient, DatasetManifest, ManifestEntry, Split};
use leadi_core::delineate::delineate_record;
use leadi_core::eval::{
    classification_metrics, kde2d, tandem_gate, Bandwidth, EvalError, MethodReport, MetricsReport, Provenance,
    RegressionMetrics, TandemOutput, TandemSummary,
};
use leadi_core::exec;
use leadi_core::model::{save_checkpoint, ModelCheckpoint, Task};
use leadi_core::sigproc::{cache, Preprocessor};
use leadi_core::synthgen::{synth_corpus, write_corpus};
use leadi_core::training::{predict, task_filter, train_task, Example, TrainConfig};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::error::CliError;

/// Shared state of one invocation.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: RunConfig,
    pub hash: String,
    /// Accept artifacts stamped with a different config hash.
    pub force: bool,
}

impl Ctx {
    pub fn new(cfg: RunConfig, force: bool) -> Result<Self, CliError> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Self { cfg, hash, force })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.paths.out_dir.join(rel)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out("manifest.json")
    }
    pub fn ingest_path(&self) -> PathBuf {
        self.out("ingest.json")
    }
    pub fn split_path(&self) -> PathBuf {
        self.out("split.json")
    }
    pub fn checkpoint_path(&self, task: Task) -> PathBuf {
        self.out(&format!("models/{task}.ckpt"))
    }
    pub fn train_log_path(&self, task: Task) -> PathBuf {
        self.out(&format!("models/{task}.log.jsonl"))
    }
    pub fn predictions_path(&self, name: &str) -> PathBuf {
        self.out(&format!("predictions/{name}.json"))
    }
    pub fn fiducials_path(&self) -> PathBuf {
        self.out("predictions/baseline.fiducials.jsonl")
    }
    pub fn eval_path(&self) -> PathBuf {
        self.out("eval.json")
    }
    pub fn plots_dir(&self) -> PathBuf {
        self.out("plots")
    }
    pub fn report_paths(&self) -> (PathBuf, PathBuf) {
        (self.out("report.json"), self.out("report.txt"))
    }

    fn check_hash(&self, what: &Path, found: Option<&str>) -> Result<(), CliError> {
        if found == Some(self.hash.as_str()) || self.force {
            return Ok(());
        }
        Err(CliError::HashMismatch(format!(
            "{} was produced by config {} but the current config is {} (use --force to accept)",
            what.display(),
            found.unwrap_or("<none>"),
            self.hash
        )))
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    write_file(path, s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| CliError::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub record_id: String,
    pub reason: String,
}

/// `out/ingest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub config_hash: String,
    pub cache_key: String,
    pub n_rows: usize,
    pub n_kept: usize,
    pub skipped_rows: Vec<leadi_core::dataio::SkippedRow>,
    pub rejected: Vec<RejectedRecord>,
}

/// `<cache_dir>/<key>.json`, row order of `<key>.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub config_hash: String,
    pub record_ids: Vec<String>,
    pub rejected: Vec<RejectedRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub record_id: String,
    /// In natural units, in `targets` order; `None` where the method gave no
    /// estimate.
    pub values: Vec<Option<f64>>,
}

/// `out/predictions/<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub config_hash: String,
    pub method: String,
    pub checkpoint_id: Option<String>,
    pub split: Split,
    pub targets: Vec<String>,
    /// Decision threshold of the presence classifier.
    pub threshold: Option<f64>,
    pub rows: Vec<PredictionRow>,
}

/// Writes a synthetic corpus (records, `labels.csv`, `manifest.json`) into
/// the data directory.
pub fn cmd_synth(ctx: &Ctx) -> Result<Value, CliError> {
    let cfg = &ctx.cfg;
    let mut corpus = synth_corpus(cfg.synth.n, &cfg.synth.distribution, cfg.seed, cfg.train.exec);
    corpus.manifest.config_hash = Some(ctx.hash.clone());
    let dir = &cfg.paths.data_dir;
    write_corpus(&corpus, dir).map_err(|e| CliError::io(dir, e))?;
    let absent = corpus.manifest.entries.iter().filter(|e| !e.labels.pr_present).count();
    info!("wrote {} synthetic records ({absent} without P wave) to {}", corpus.records.len(), dir.display());
    Ok(json!({"records": corpus.records.len(), "pr_absent": absent, "data_dir": dir}))
}

fn cache_key(cfg: &RunConfig, labels_csv: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(labels_csv);
    h.update(serde_json::to_vec(&cfg.ingest).expect("serializes"));
    h.update(serde_json::to_vec(&cfg.preprocess).expect("serializes"));
    hex(&h.finalize())[..16].to_string()
}

fn cache_paths(cfg: &RunConfig, key: &str) -> (PathBuf, PathBuf) {
    let d = &cfg.paths.cache_dir;
    (d.join(format!("{key}.bin")), d.join(format!("{key}.json")))
}

/// Reads the label table and waveforms, preprocesses every record and writes
/// the manifest of kept records plus the preprocessed cache.
pub fn cmd_ingest(ctx: &Ctx) -> Result<Value, CliError> {
    let cfg = &ctx.cfg;
    let labels_path = cfg.paths.data_dir.join(&cfg.ingest.labels_file);
    let csv_bytes = read_file(&labels_path)?;
    let table = parse_label_table(&csv_bytes, &cfg.ingest.columns).map_err(|e| CliError::io(&labels_path, e))?;
    for s in &table.skipped {
        warn!("label row {} skipped: {}", s.row, s.reason);
    }
    let key = cache_key(cfg, &csv_bytes);
    let (bin_path, index_path) = cache_paths(cfg, &key);

    let cached = if !ctx.force && bin_path.exists() && index_path.exists() {
        let index: CacheIndex = read_json(&index_path)?;
        ctx.check_hash(&index_path, Some(&index.config_hash)).ok().map(|_| index)
    } else {
        None
    };
    let cache_hit = cached.is_some();
    let (kept_ids, rejected) = match cached {
        Some(index) => {
            info!("reusing preprocessed cache {}", bin_path.display());
            (index.record_ids, index.rejected)
        }
        None => {
            let pre = Preprocessor::new(cfg.preprocess.clone()).map_err(|e| CliError::Config(format!("preprocess: {e}")))?;
            let results = exec::map(cfg.train.exec, &table.rows, |row| {
                let header = cfg.paths.data_dir.join(cfg.ingest.locator_pattern.replace("{id}", &row.record_id));
                let record = read_wfdb_record(&header, &cfg.ingest.lead).map_err(|e| e.to_string())?;
                pre.run(&record).map_err(|e| e.to_string())
            });
            let mut ids = Vec::new();
            let mut rows = Vec::new();
            let mut rejected = Vec::new();
            for (row, r) in table.rows.iter().zip(results) {
                match r {
                    Ok(sig) => {
                        ids.push(row.record_id.clone());
                        rows.push(sig);
                    }
                    Err(reason) => {
                        warn!("record {} rejected: {reason}", row.record_id);
                        rejected.push(RejectedRecord { record_id: row.record_id.clone(), reason });
                    }
                }
            }
            if let Some(dir) = bin_path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            cache::write(&bin_path, &rows).map_err(|e| CliError::io(&bin_path, e))?;
            let index = CacheIndex { config_hash: ctx.hash.clone(), record_ids: ids.clone(), rejected: rejected.clone() };
            write_json(&index_path, &index)?;
            (ids, rejected)
        }
    };

    let by_id: HashMap<&str, _> = table.rows.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let entries = kept_ids
        .iter()
        .map(|id| {
            let r = by_id[id.as_str()];
            ManifestEntry {
                record_id: id.clone(),
                patient_id: r.patient_id.clone().unwrap_or_else(|| id.clone()),
                locator: cfg.ingest.locator_pattern.replace("{id}", id),
                labels: r.labels,
            }
        })
        .collect();
    let mut manifest = DatasetManifest::new(entries).map_err(CliError::stage)?;
    manifest.config_hash = Some(ctx.hash.clone());
    write_file(&ctx.manifest_path(), manifest.to_json() + "\n")?;
    let summary = IngestSummary {
        config_hash: ctx.hash.clone(),
        cache_key: key,
        n_rows: table.rows.len() + table.skipped.len(),
        n_kept: manifest.entries.len(),
        skipped_rows: table.skipped,
        rejected,
    };
    write_json(&ctx.ingest_path(), &summary)?;
    info!("ingested {} of {} records", summary.n_kept, summary.n_rows);
    Ok(json!({
        "kept": summary.n_kept,
        "rows": summary.n_rows,
        "skipped_rows": summary.skipped_rows.len(),
        "rejected": summary.rejected.len(),
        "cache_key": summary.cache_key,
        "cache_hit": cache_hit,
    }))
}

fn load_manifest(ctx: &Ctx, path: &Path) -> Result<DatasetManifest, CliError> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| CliError::io(path, e))?;
    let m = DatasetManifest::from_json(&text).map_err(|e| CliError::io(path, e))?;
    ctx.check_hash(path, m.config_hash.as_deref())?;
    Ok(m)
}

/// Assigns patients to train / validation / holdout.
pub fn cmd_split(ctx: &Ctx) -> Result<Value, CliError> {
    let manifest = load_manifest(ctx, &ctx.manifest_path())?;
    let mut split = split_by_patient(&manifest, ctx.cfg.split, ctx.cfg.seed).map_err(CliError::stage)?;
    split.config_hash = Some(ctx.hash.clone());
    write_file(&ctx.split_path(), split.to_json() + "\n")?;
    let count = |s| split.entries_in(s).count();
    let (tr, va, ho) = (count(Split::Train), count(Split::Validation), count(Split::Holdout));
    info!("split: {tr} train, {va} validation, {ho} holdout records");
    Ok(json!({"train": tr, "validation": va, "holdout": ho, "patients": split.patients().len()}))
}

/// Split manifest and the cached signals of its records.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub signals: HashMap<String, Vec<f32>>,
}

impl Dataset {
    pub fn load(ctx: &Ctx) -> Result<Self, CliError> {
        let manifest = load_manifest(ctx, &ctx.split_path())?;
        let ingest: IngestSummary = read_json(&ctx.ingest_path())?;
        ctx.check_hash(&ctx.ingest_path(), Some(&ingest.config_hash))?;
        let (bin, index_path) = cache_paths(&ctx.cfg, &ingest.cache_key);
        let index: CacheIndex = read_json(&index_path)?;
        let rows = cache::read(&bin).map_err(|e| CliError::io(&bin, e))?;
        if rows.len() != index.record_ids.len() {
            return Err(CliError::Io(format!("{}: {} rows for {} ids", bin.display(), rows.len(), index.record_ids.len())));
        }
        let signals: HashMap<String, Vec<f32>> = index.record_ids.into_iter().zip(rows).collect();
        if let Some(e) = manifest.entries.iter().find(|e| !signals.contains_key(&e.record_id)) {
            return Err(CliError::Io(format!("record {} missing from cache {}", e.record_id, bin.display())));
        }
        Ok(Self { manifest, signals })
    }

    pub fn entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.manifest.entries_in(split).collect()
    }

    pub fn examples(&self, split: Split) -> Vec<Example> {
        self.manifest
            .entries_in(split)
            .map(|e| Example { record_id: e.record_id.clone(), signal: self.signals[&e.record_id].clone(), labels: e.labels })
            .collect()
    }
}

fn tasks_or(ctx: &Ctx, task: Option<Task>) -> Vec<Task> {
    task.map_or_else(|| ctx.cfg.tasks.clone(), |t| vec![t])
}

fn train_config(ctx: &Ctx, task: Task) -> TrainConfig {
    TrainConfig { seed: ctx.cfg.task_seed(task), ..ctx.cfg.train.clone() }
}

/// Trains the selected task (every configured task when `None`) and writes
/// checkpoint and epoch log.
pub fn cmd_train(ctx: &Ctx, task: Option<Task>) -> Result<Value, CliError> {
    let data = Dataset::load(ctx)?;
    let train = data.examples(Split::Train);
    let val = data.examples(Split::Validation);
    let mut out = Vec::new();
    for task in tasks_or(ctx, task) {
        let excluded = train.iter().chain(&val).filter(|e| !task_filter(task, &e.labels)).count();
        if excluded > 0 || task == Task::Pr {
            info!("{task}: excluded {excluded} records without an identifiable P wave from training");
        }
        let outcome = train_task(task, &train, &val, &ctx.cfg.model, &train_config(ctx, task)).map_err(CliError::stage)?;
        let mut ck = outcome.checkpoint;
        ck.config_hash = Some(ctx.hash.clone());
        let path = ctx.checkpoint_path(task);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        save_checkpoint(&ck, &path).map_err(|e| CliError::io(&path, e))?;
        write_file(&ctx.train_log_path(task), outcome.log.iter().map(|l| serde_json::to_string(l).unwrap() + "\n").collect::<String>())?;
        let last = outcome.log.last();
        info!(
            "{task}: best epoch {} of {}, val loss {:.5}",
            outcome.best_epoch,
            outcome.log.len(),
            outcome.log.get(outcome.best_epoch).map_or(f64::NAN, |l| l.val_loss)
        );
        out.push(json!({
            "task": task,
            "excluded": excluded,
            "epochs": outcome.log.len(),
            "best_epoch": outcome.best_epoch,
            "final_train_loss": last.map(|l| l.train_loss),
            "checkpoint": path,
        }));
    }
    Ok(Value::Array(out))
}

/// Loads a checkpoint, checking its stamp; returns it with its id.
pub fn load_task_checkpoint(ctx: &Ctx, task: Task) -> Result<(ModelCheckpoint, String), CliError> {
    let path = ctx.checkpoint_path(task);
    let bytes = read_file(&path)?;
    let ck = ModelCheckpoint::from_bytes(&bytes).map_err(|e| CliError::io(&path, e))?;
    ctx.check_hash(&path, ck.config_hash.as_deref())?;
    if ck.task != task {
        return Err(CliError::Stage(format!("{} holds a {} model", path.display(), ck.task)));
    }
    Ok((ck, sha256_hex(&bytes)))
}

/// Predictions of the selected task(s) on one split, in natural units.
pub fn cmd_infer(ctx: &Ctx, task: Option<Task>, split: Split) -> Result<Value, CliError> {
    let data = Dataset::load(ctx)?;
    let entries = data.entries(split);
    let signals: Vec<&[f32]> = entries.iter().map(|e| data.signals[&e.record_id].as_slice()).collect();
    let mut out = Vec::new();
    for task in tasks_or(ctx, task) {
        let (ck, id) = load_task_checkpoint(ctx, task)?;
        let model = ck.to_model().map_err(CliError::stage)?;
        let raw = predict(&model, &signals, ctx.cfg.train.batch_size, ctx.cfg.train.exec).map_err(CliError::stage)?;
        let rows = entries
            .iter()
            .zip(&raw)
            .map(|(e, o)| PredictionRow {
                record_id: e.record_id.clone(),
                values: o
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| Some(if task.is_classifier() { v as f64 } else { ck.normalizer.inverse(j, v as f64) }))
                    .collect(),
            })
            .collect();
        let file = PredictionFile {
            config_hash: ctx.hash.clone(),
            method: task.as_str().to_string(),
            checkpoint_id: Some(id),
            split,
            targets: output_names(task),
            threshold: ck.prchk_threshold,
            rows,
        };
        let path = ctx.predictions_path(task.as_str());
        write_json(&path, &file)?;
        out.push(json!({"task": task, "records": entries.len(), "predictions": path}));
    }
    Ok(Value::Array(out))
}

fn output_names(task: Task) -> Vec<String> {
    if task.is_classifier() {
        vec![PRESENCE.into()]
    } else {
        task.target_names().iter().map(|s| s.to_string()).collect()
    }
}

const PRESENCE: &str = "pr_present";
pub const BASELINE: &str = "baseline";
const BASELINE_TARGETS: [&str; 5] = ["pr_ms", "qrs_ms", "qt_ms", "hr_bpm", "pr_present"];

/// Rule-based delineation of one split from the preprocessed signals.
pub fn cmd_delineate(ctx: &Ctx, split: Split) -> Result<Value, CliError> {
    let data = Dataset::load(ctx)?;
    let entries = data.entries(split);
    let rate = ctx.cfg.preprocess.target_rate;
    let cfg = &ctx.cfg.baseline;
    let out = exec::map(ctx.cfg.train.exec, &entries, |e| {
        let x: Vec<f64> = data.signals[&e.record_id].iter().map(|&v| v as f64).collect();
        let (values, line) = match delineate_record(&x, rate, cfg) {
            Ok(d) => {
                let i = d.intervals;
                let values = vec![i.pr_ms, i.qrs_ms, i.qt_ms, i.hr_bpm, Some(if i.pr_present { 1.0 } else { 0.0 })];
                (values, json!({"config_hash": ctx.hash, "record_id": e.record_id, "delineation": d}))
            }
            Err(err) => {
                warn!("delineation of {} failed: {err}", e.record_id);
                let line = json!({"config_hash": ctx.hash, "record_id": e.record_id, "error": err.to_string()});
                (vec![None; BASELINE_TARGETS.len()], line)
            }
        };
        (PredictionRow { record_id: e.record_id.clone(), values }, line.to_string() + "\n")
    });
    let (rows, lines): (Vec<PredictionRow>, Vec<String>) = out.into_iter().unzip();
    let fiducials = ctx.fiducials_path();
    write_file(&fiducials, lines.concat())?;
    let failed = rows.iter().filter(|r| r.values[4].is_none()).count();
    let file = PredictionFile {
        config_hash: ctx.hash.clone(),
        method: BASELINE.into(),
        checkpoint_id: None,
        split,
        targets: BASELINE_TARGETS.iter().map(|s| s.to_string()).collect(),
        threshold: None,
        rows,
    };
    let path = ctx.predictions_path(BASELINE);
    write_json(&path, &file)?;
    Ok(json!({"records": entries.len(), "failed": failed, "predictions": path, "fiducials": fiducials}))
}

fn load_predictions(ctx: &Ctx, name: &str) -> Result<PredictionFile, CliError> {
    let path = ctx.predictions_path(name);
    let f: PredictionFile = read_json(&path)?;
    ctx.check_hash(&path, Some(&f.config_hash))?;
    Ok(f)
}

/// Label accessor for a regression target name.
fn label_of(l: &leadi_core::dataio::IntervalLabels, target: &str) -> f64 {
    match target {
        "qt_ms" => l.qt_ms,
        "qrs_ms" => l.qrs_ms,
        "pr_ms" => l.pr_ms,
        "hr_bpm" => l.hr_bpm,
        other => unreachable!("unknown target {other}"),
    }
}

fn unit_of(target: &str) -> &'static str {
    if target == "hr_bpm" {
        "bpm"
    } else {
        "ms"
    }
}

struct Collected {
    target: String,
    preds: Vec<f64>,
    labels: Vec<f64>,
}

impl Collected {
    fn metrics(&self) -> Result<RegressionMetrics, EvalError> {
        RegressionMetrics::compute(&self.target, unit_of(&self.target), &self.preds, &self.labels)
    }
}

/// Pairs of (prediction, label) for target column `j`, over rows whose label
/// passes `keep` and whose prediction exists.
fn collect(
    file: &PredictionFile,
    j: usize,
    labels: &HashMap<&str, leadi_core::dataio::IntervalLabels>,
    keep: impl Fn(&PredictionRow, &leadi_core::dataio::IntervalLabels) -> bool,
) -> Result<Collected, CliError> {
    let target = file.targets[j].clone();
    let (mut preds, mut ys) = (Vec::new(), Vec::new());
    for r in &file.rows {
        let l = labels
            .get(r.record_id.as_str())
            .ok_or_else(|| CliError::Stage(format!("{} predicts unknown record {}", file.method, r.record_id)))?;
        if let Some(v) = r.values[j] {
            if keep(r, l) {
                preds.push(v);
                ys.push(label_of(l, &target));
            }
        }
    }
    Ok(Collected { target, preds, labels: ys })
}

/// Presence scores (last column) against label presence.
fn presence_pairs(
    file: &PredictionFile,
    labels: &HashMap<&str, leadi_core::dataio::IntervalLabels>,
) -> Result<(Vec<f64>, Vec<bool>), CliError> {
    let j = file
        .targets
        .iter()
        .position(|t| t == PRESENCE)
        .ok_or_else(|| CliError::Stage(format!("{} predictions have no {PRESENCE} column", file.method)))?;
    let (mut scores, mut truth) = (Vec::new(), Vec::new());
    for r in &file.rows {
        let l = labels
            .get(r.record_id.as_str())
            .ok_or_else(|| CliError::Stage(format!("{} predicts unknown record {}", file.method, r.record_id)))?;
        if let Some(v) = r.values[j] {
            scores.push(v);
            truth.push(l.pr_present);
        }
    }
    Ok((scores, truth))
}

/// Scores every available prediction file against the split's labels and
/// renders the density plots.
pub fn cmd_eval(ctx: &Ctx) -> Result<Value, CliError> {
    let manifest = load_manifest(ctx, &ctx.split_path())?;
    let labels: HashMap<&str, _> = manifest.entries.iter().map(|e| (e.record_id.as_str(), e.labels)).collect();
    let mut preds: Vec<(Task, PredictionFile)> = Vec::new();
    for &task in Task::ALL.iter().filter(|t| ctx.cfg.tasks.contains(t)) {
        preds.push((task, load_predictions(ctx, task.as_str())?));
    }
    let find = |t: Task| preds.iter().find(|(task, _)| *task == t).map(|(_, f)| f);

    let mut methods = Vec::new();
    let mut collected: Vec<(String, Collected)> = Vec::new();
    let mut ikres = MethodReport { method: "ikres".into(), regression: vec![], classification: None, tandem: None };
    for (task, file) in &preds {
        if task.is_classifier() {
            let (scores, truth) = presence_pairs(file, &labels)?;
            let threshold = file.threshold.ok_or_else(|| CliError::Stage("prchk predictions carry no threshold".into()))?;
            match classification_metrics(&scores, &truth, threshold) {
                Ok(m) => ikres.classification = Some(m),
                Err(EvalError::SingleClass) => warn!("prchk metrics skipped: the split holds a single class"),
                Err(e) => return Err(e.into()),
            }
            continue;
        }
        for j in 0..file.targets.len() {
            let c = collect(file, j, &labels, |_, l| task_filter(*task, l))?;
            ikres.regression.push(c.metrics()?);
            collected.push(("ikres".into(), c));
        }
    }
    methods.push(ikres);

    if let (Some(cls), Some(reg)) = (find(Task::Prchk), find(Task::Pr)) {
        if cls.rows.iter().map(|r| &r.record_id).ne(reg.rows.iter().map(|r| &r.record_id)) {
            return Err(CliError::Stage("prchk and pr predictions cover different records".into()));
        }
        let probs: Vec<f64> = cls.rows.iter().map(|r| r.values[0].unwrap_or(0.0)).collect();
        let pr: Vec<f64> = reg.rows.iter().map(|r| r.values[0].unwrap_or(f64::NAN)).collect();
        let threshold = cls.threshold.ok_or_else(|| CliError::Stage("prchk predictions carry no threshold".into()))?;
        let gated = tandem_gate(&probs, &pr, threshold)?;
        let (mut p, mut y) = (Vec::new(), Vec::new());
        for (row, g) in reg.rows.iter().zip(&gated) {
            if let TandemOutput::Emitted { pr_ms, .. } = g {
                p.push(*pr_ms);
                y.push(labels[row.record_id.as_str()].pr_ms);
            }
        }
        let c = Collected { target: "pr_ms".into(), preds: p, labels: y };
        let n_emitted = c.preds.len();
        methods.push(MethodReport {
            method: "tandem".into(),
            regression: vec![c.metrics()?],
            classification: None,
            tandem: Some(TandemSummary { n_total: gated.len(), n_emitted, n_suppressed: gated.len() - n_emitted }),
        });
        collected.push(("tandem".into(), c));
    }

    let baseline_path = ctx.predictions_path(BASELINE);
    if baseline_path.exists() {
        let file = load_predictions(ctx, BASELINE)?;
        let mut m = MethodReport { method: BASELINE.into(), regression: vec![], classification: None, tandem: None };
        for target in ["qt_ms", "hr_bpm", "qrs_ms", "pr_ms"] {
            let j = BASELINE_TARGETS.iter().position(|t| *t == target).expect("known target");
            let c = collect(&file, j, &labels, |r, l| target != "pr_ms" || (l.pr_present && r.values[4] == Some(1.0)))?;
            if c.preds.is_empty() {
                warn!("baseline produced no {target} estimates");
                continue;
            }
            m.regression.push(c.metrics()?);
            collected.push((BASELINE.into(), c));
        }
        let (scores, truth) = presence_pairs(&file, &labels)?;
        match classification_metrics(&scores, &truth, 0.5) {
            Ok(cm) => m.classification = Some(cm),
            Err(e) => warn!("baseline presence metrics unavailable: {e}"),
        }
        methods.push(m);
    } else {
        info!("no baseline predictions at {}", baseline_path.display());
    }

    if ctx.cfg.eval.plots {
        let dir = ctx.plots_dir();
        for (method, c) in &collected {
            match kde2d(&c.labels, &c.preds, Bandwidth::Silverman, ctx.cfg.eval.kde_grid) {
                Ok(grid) => {
                    let stem = dir.join(format!("{method}_{}", c.target));
                    write_file(&stem.with_extension("csv"), grid.to_csv())?;
                    let title = format!("{method}: {}", c.target);
                    write_file(&stem.with_extension("svg"), grid.to_svg(&title, unit_of(&c.target)))?;
                }
                Err(e) => warn!("no density plot for {method} {}: {e}", c.target),
            }
        }
    }

    let report = MetricsReport {
        provenance: Provenance {
            dataset_id: sha256_hex(manifest.to_json().as_bytes()),
            checkpoint_ids: preds.iter().filter_map(|(_, f)| f.checkpoint_id.clone()).collect(),
            config_hash: ctx.hash.clone(),
        },
        methods,
    };
    write_file(&ctx.eval_path(), report.to_json())?;
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

/// Merges evaluation outputs into `report.json` and `report.txt`.
pub fn cmd_report(ctx: &Ctx, inputs: &[PathBuf]) -> Result<Value, CliError> {
    let default = [ctx.eval_path()];
    let inputs = if inputs.is_empty() { &default[..] } else { inputs };
    let mut merged: Option<MetricsReport> = None;
    for path in inputs {
        let text = String::from_utf8(read_file(path)?).map_err(|e| CliError::io(path, e))?;
        let r = MetricsReport::from_json(&text).map_err(|e| CliError::io(path, e))?;
        ctx.check_hash(path, Some(&r.provenance.config_hash))?;
        match &mut merged {
            None => merged = Some(r),
            Some(m) => {
                if m.provenance.config_hash != r.provenance.config_hash && !ctx.force {
                    return Err(CliError::HashMismatch(format!(
                        "{} has config hash {}, expected {}",
                        path.display(),
                        r.provenance.config_hash,
                        m.provenance.config_hash
                    )));
                }
                for id in r.provenance.checkpoint_ids {
                    if !m.provenance.checkpoint_ids.contains(&id) {
                        m.provenance.checkpoint_ids.push(id);
                    }
                }
                m.methods.extend(r.methods);
            }
        }
    }
    let report = merged.expect("at least one input");
    let (json_path, txt_path) = ctx.report_paths();
    write_file(&json_path, report.to_json())?;
    write_file(&txt_path, report.to_table())?;
    Ok(json!({"report": json_path, "table": txt_path, "methods": report.methods.len()}))
}

/// Every stage in order, on the holdout split.
pub fn cmd_run(ctx: &Ctx) -> Result<Value, CliError> {
    let mut out = serde_json::Map::new();
    out.insert("synth".into(), cmd_synth(ctx)?);
    out.insert("ingest".into(), cmd_ingest(ctx)?);
    out.insert("split".into(), cmd_split(ctx)?);
    out.insert("train".into(), cmd_train(ctx, None)?);
    out.insert("infer".into(), cmd_infer(ctx, None, Split::Holdout)?);
    out.insert("delineate".into(), cmd_delineate(ctx, Split::Holdout)?);
    cmd_eval(ctx)?;
    out.insert("report".into(), cmd_report(ctx, &[])?);
    Ok(Value::Object(out))
}
