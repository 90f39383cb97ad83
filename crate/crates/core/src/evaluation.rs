//! Standard and robust accuracy of a pipeline, the benchmark matrix and the
//! transform-strength sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use atop_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{run_attack, AttackConfig};
use crate::data::{sample_eval_subset, LabeledDataset, EVAL_SUBSET};
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, ClassifierNet, IdentityPurifier, Pipeline, Purifier, PurifierNet};
use crate::rng::SeededRng;
use crate::transforms::{TransformConfig, TransformKind};

const EVAL_BATCH: usize = 128;

/// Accuracy in percent over `repeats` independent transform draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub per_repeat: Vec<f64>,
}

impl AccuracyEstimate {
    fn from_repeats(per_repeat: Vec<f64>) -> Self {
        let n = per_repeat.len() as f64;
        let mean = per_repeat.iter().sum::<f64>() / n;
        let stderr = if per_repeat.len() > 1 {
            let var = per_repeat.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            per_repeat,
        }
    }
}

fn check_repeats(pipeline: &Pipeline<'_, f32>, repeats: usize) -> Result<()> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    if pipeline.is_stochastic() && repeats < 2 {
        return Err(Error::InvalidConfig(
            "a stochastic pipeline needs at least 2 repeats".into(),
        ));
    }
    Ok(())
}

fn accuracy_on(
    pipeline: &Pipeline<'_, f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    rng: &mut SeededRng,
    repeats: usize,
) -> Result<AccuracyEstimate> {
    if labels.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut per = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut correct = 0usize;
        for start in (0..labels.len()).step_by(EVAL_BATCH) {
            let end = (start + EVAL_BATCH).min(labels.len());
            let pred = pipeline.predict(&images.batch_range(start..end), rng)?;
            correct += pred.iter().zip(&labels[start..end]).filter(|(p, y)| p == y).count();
        }
        per.push(100.0 * correct as f64 / labels.len() as f64);
    }
    Ok(AccuracyEstimate::from_repeats(per))
}

/// Clean accuracy with transform draws from the `eval` stream of `rng`.
pub fn standard_accuracy(
    pipeline: &Pipeline<'_, f32>,
    dataset: &LabeledDataset,
    rng: &SeededRng,
    repeats: usize,
) -> Result<AccuracyEstimate> {
    check_repeats(pipeline, repeats)?;
    accuracy_on(
        pipeline,
        dataset.images(),
        dataset.labels(),
        &mut rng.derive("eval"),
        repeats,
    )
}

/// Adversarial examples built once from the `attack` stream, then scored
/// like [`standard_accuracy`] with draws from the `eval` stream.
pub fn robust_accuracy(
    pipeline: &Pipeline<'_, f32>,
    attack: &AttackConfig,
    dataset: &LabeledDataset,
    rng: &SeededRng,
    repeats: usize,
) -> Result<AccuracyEstimate> {
    check_repeats(pipeline, repeats)?;
    let adv = adversarial_images(pipeline, attack, dataset, rng)?;
    accuracy_on(pipeline, &adv, dataset.labels(), &mut rng.derive("eval"), repeats)
}

/// The adversarial copy of `dataset` that [`robust_accuracy`] scores.
pub fn adversarial_images(
    pipeline: &Pipeline<'_, f32>,
    attack: &AttackConfig,
    dataset: &LabeledDataset,
    rng: &SeededRng,
) -> Result<Tensor<f32>> {
    attack.validate()?;
    if dataset.is_empty() {
        return Err(Error::NoRecords);
    }
    let mut stream = rng.derive("attack");
    let mut parts = Vec::new();
    for start in (0..dataset.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(dataset.len());
        let x = dataset.images().batch_range(start..end);
        parts.push(run_attack(
            pipeline,
            &x,
            &dataset.labels()[start..end],
            attack,
            &mut stream,
        )?);
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Tensor::concat_rows(&refs))
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    Ok(Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Purifier checkpoint for one cell of the benchmark matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurifierEntry {
    pub transform: TransformKind,
    pub atop: bool,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub subset: usize,
    pub repeats: usize,
    pub transforms: Vec<TransformConfig>,
    pub attacks: Vec<AttackConfig>,
    pub classifier: PathBuf,
    pub purifiers: Vec<PurifierEntry>,
}

impl BenchmarkConfig {
    pub fn new(seed: u64, classifier: PathBuf) -> Self {
        Self {
            seed,
            subset: EVAL_SUBSET,
            repeats: 2,
            transforms: TransformKind::ALL.iter().map(|&k| TransformConfig::new(k)).collect(),
            attacks: Vec::new(),
            classifier,
            purifiers: Vec::new(),
        }
    }
}

/// One cell of the matrix; `attack` is `"none"` for clean-only rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub transform: String,
    pub atop: bool,
    pub attack: String,
    pub standard_acc: f64,
    pub standard_stderr: f64,
    pub robust_acc: Option<f64>,
    pub robust_stderr: Option<f64>,
    pub eps: Option<f32>,
    pub steps: Option<usize>,
    pub eot_k: Option<usize>,
    pub bpda: Option<bool>,
    pub subset: usize,
    pub repeats: usize,
    pub seed: u64,
}

/// Wall-clock seconds per row, kept apart so the rows reproduce exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowTiming {
    pub transform: String,
    pub atop: bool,
    pub attack: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub master_seed: u64,
    pub config_hash: String,
    pub config: BenchmarkConfig,
    pub complete: bool,
    pub rows: Vec<EvalRow>,
    pub timings: Vec<RowTiming>,
}

impl EvalReport {
    pub fn file_stem(&self) -> String {
        format!("report-{}-seed{}", &self.config_hash[..12], self.master_seed)
    }

    pub fn row(&self, transform: &str, atop: bool, attack: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.transform == transform && r.atop == atop && r.attack == attack)
    }

    /// Writes `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{}.csv", self.file_stem()));
        let mut w = csv::Writer::from_path(&csv_path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{}.json", self.file_stem()));
        fs::write(&json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}

/// Name of the marker left next to a partial report.
pub const RESUMABLE_MARKER: &str = "RESUMABLE";

fn load_classifier(path: &Path) -> Result<ClassifierNet<f32>> {
    load_checkpoint(path)?.into_classifier(None)
}

fn load_purifier(path: &Path) -> Result<PurifierNet<f32>> {
    load_checkpoint(path)?.into_purifier(None)
}

/// Runs the {transform} x {AToP off, on} x {attack} matrix on an evaluation
/// subset of `test`. With `out_dir`, the report is rewritten after every row
/// next to a [`RESUMABLE_MARKER`]; a later run with the same config picks up
/// the finished rows and removes the marker when done.
pub fn run_benchmark(cfg: &BenchmarkConfig, test: &LabeledDataset, out_dir: Option<&Path>) -> Result<EvalReport> {
    if cfg.repeats < 2 {
        return Err(Error::InvalidConfig("benchmark repeats must be at least 2".into()));
    }
    let [_, h, w] = test.image_shape();
    for t in &cfg.transforms {
        t.validate(h, w)?;
    }
    let mut ids = Vec::new();
    for a in &cfg.attacks {
        a.validate()?;
        if ids.contains(&a.id()) {
            return Err(Error::InvalidConfig(format!("attack {} listed twice", a.id())));
        }
        ids.push(a.id());
    }
    // every referenced checkpoint must exist before any work starts
    let classifier = load_classifier(&cfg.classifier)?;
    let mut cells = Vec::new();
    for t in &cfg.transforms {
        for atop in [false, true] {
            if let Some(e) = cfg.purifiers.iter().find(|e| e.transform == t.kind && e.atop == atop) {
                cells.push((t.clone(), atop, load_purifier(&e.checkpoint)?));
            }
        }
    }
    let hash = config_hash(cfg)?;
    let master = SeededRng::new(cfg.seed);
    let subset = sample_eval_subset(test, cfg.subset.min(test.len()), &mut master.derive("subset"))?;

    let mut report = EvalReport {
        master_seed: cfg.seed,
        config_hash: hash,
        config: cfg.clone(),
        complete: false,
        rows: Vec::new(),
        timings: Vec::new(),
    };
    let previous = match out_dir {
        Some(dir) if dir.join(RESUMABLE_MARKER).exists() => {
            let path = dir.join(format!("{}.json", report.file_stem()));
            fs::read_to_string(&path)
                .ok()
                .and_then(|s| serde_json::from_str::<EvalReport>(&s).ok())
                .filter(|r| r.config_hash == report.config_hash)
        }
        _ => None,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let marker = dir.join(RESUMABLE_MARKER);
        fs::write(&marker, "partial report; rerun the same config to resume\n").map_err(|e| Error::io(&marker, e))?;
    }

    for (t, atop, purifier) in &cells {
        let pipe = Pipeline::new(Some(t.clone()), purifier as &dyn Purifier<f32>, &classifier);
        let name = t.kind.name().to_string();
        let cell_rng = master.derive(&format!("cell/{name}/{atop}"));
        let targets: Vec<Option<&AttackConfig>> = if cfg.attacks.is_empty() {
            vec![None]
        } else {
            cfg.attacks.iter().map(Some).collect()
        };
        let mut standard = None;
        for attack in targets {
            let attack_id = attack.map_or_else(|| "none".to_string(), |a| a.id());
            if let Some(prev) = previous.as_ref().and_then(|p| p.row(&name, *atop, &attack_id)) {
                report.rows.push(prev.clone());
                continue;
            }
            let started = Instant::now();
            let std_acc = match &standard {
                Some(s) => s,
                None => standard.insert(standard_accuracy(&pipe, &subset, &cell_rng, cfg.repeats)?),
            };
            let mut row = EvalRow {
                transform: name.clone(),
                atop: *atop,
                attack: attack_id.clone(),
                standard_acc: std_acc.mean,
                standard_stderr: std_acc.stderr,
                robust_acc: None,
                robust_stderr: None,
                eps: None,
                steps: None,
                eot_k: None,
                bpda: None,
                subset: subset.len(),
                repeats: cfg.repeats,
                seed: cfg.seed,
            };
            if let Some(attack) = attack {
                let rob = robust_accuracy(&pipe, attack, &subset, &cell_rng.derive(&attack_id), cfg.repeats)?;
                row.robust_acc = Some(rob.mean);
                row.robust_stderr = Some(rob.stderr);
                row.eps = Some(attack.eps);
                row.steps = Some(attack.steps);
                row.eot_k = Some(attack.eot_k);
                row.bpda = Some(attack.bpda);
            }
            report.rows.push(row);
            report.timings.push(RowTiming {
                transform: name.clone(),
                atop: *atop,
                attack: attack_id.clone(),
                seconds: started.elapsed().as_secs_f64(),
            });
            if let Some(dir) = out_dir {
                report.save(dir)?;
            }
        }
    }
    report.complete = true;
    if let Some(dir) = out_dir {
        report.save(dir)?;
        let marker = dir.join(RESUMABLE_MARKER);
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Sigma,
    Rate,
    NMasks,
}

impl SweepParam {
    fn apply(self, base: &TransformConfig, value: f64) -> Result<TransformConfig> {
        Ok(match self {
            SweepParam::Sigma => base.clone().with_sigma(value as f32),
            SweepParam::Rate => base.clone().with_rate(value),
            SweepParam::NMasks => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "n_masks must be a positive integer, got {value}"
                    )));
                }
                base.clone().with_masks(value as usize)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub param: SweepParam,
    pub value: f64,
    pub standard_acc: f64,
    pub standard_stderr: f64,
    pub robust_acc: Option<f64>,
    pub robust_stderr: Option<f64>,
}

/// Standard (and, given an attack, robust) accuracy of the pipeline for each
/// value of one transform parameter. Every point uses the same seed.
#[allow(clippy::too_many_arguments)]
pub fn tradeoff_sweep(
    param: SweepParam,
    values: &[f64],
    base: &TransformConfig,
    purifier: &dyn Purifier<f32>,
    classifier: &ClassifierNet<f32>,
    attack: Option<&AttackConfig>,
    dataset: &LabeledDataset,
    rng: &SeededRng,
    repeats: usize,
) -> Result<Vec<SweepRecord>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one value".into()));
    }
    let [_, h, w] = dataset.image_shape();
    let cfgs = values
        .iter()
        .map(|&v| {
            let c = param.apply(base, v)?;
            c.validate(h, w)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(values.len());
    for (t, &value) in cfgs.into_iter().zip(values) {
        let pipe = Pipeline::new(Some(t), purifier, classifier);
        let std_acc = standard_accuracy(&pipe, dataset, rng, repeats)?;
        let rob = attack
            .map(|a| robust_accuracy(&pipe, a, dataset, rng, repeats))
            .transpose()?;
        out.push(SweepRecord {
            param,
            value,
            standard_acc: std_acc.mean,
            standard_stderr: std_acc.stderr,
            robust_acc: rob.as_ref().map(|r| r.mean),
            robust_stderr: rob.as_ref().map(|r| r.stderr),
        });
    }
    Ok(out)
}

pub fn write_sweep_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Accuracy of the bare classifier (no transform, identity purifier).
pub fn undefended_accuracy(classifier: &ClassifierNet<f32>, dataset: &LabeledDataset) -> Result<f64> {
    let pipe = Pipeline::new(None, &IdentityPurifier, classifier);
    Ok(standard_accuracy(&pipe, dataset, &SeededRng::new(0), 1)?.mean)
}
