//! Experiment configuration: one TOML file per experiment.
//!
//! Every section except `[dataset]` may be omitted. Unknown keys are
//! rejected at every level. Relative dataset directories are resolved
//! against the directory holding the config file, and the fully resolved
//! config is what gets hashed and written into the run directory.
//!
//! ```toml
//! version = 1
//!
//! [seeds]
//! master = 0
//!
//! [dataset.synthetic]      # or: train_dir = "...", test_dir = "..."
//! classes = 10
//! height = 16
//! width = 16
//! per_class = 200
//!
//! [classifier]
//! widths = [16, 32, 64]
//! [classifier.train]
//! epochs = 12
//!
//! [purifier]
//! variant = "gan"
//! [purifier.pretrain]
//! epochs = 30
//!
//! [transform]
//! kind = "RT2"
//!
//! [atop]
//! lambda = 0.1
//!
//! [[attacks]]
//! kind = "PGD"
//! norm = "l_inf"
//! eps = 0.0313725
//! steps = 10
//!
//! [eval]
//! subset = 512
//! repeats = 2
//!
//! [sweep]
//! param = "rate"
//! values = [0.125, 0.25, 0.5]
//! ```

use std::path::{Path, PathBuf};

use atop_core::attacks::AttackConfig;
use atop_core::data::{SyntheticSpec, EVAL_SUBSET};
use atop_core::evaluation::{config_hash, SweepParam};
use atop_core::models::PurifierVariant;
use atop_core::training::{AtopConfig, ClassifierTrainConfig, PretrainConfig};
use atop_core::transforms::{TransformConfig, TransformKind};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub version: u32,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub purifier: PurifierSection,
    #[serde(default = "default_transform")]
    pub transform: TransformConfig,
    #[serde(default)]
    pub atop: AtopConfig,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub seeds: SeedsSection,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_transform() -> TransformConfig {
    TransformConfig::new(TransformKind::Rt2)
}

/// Exactly one source: a synthetic spec or a pair of dataset directories.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Per-class size of the synthetic test split; defaults to `per_class`.
    #[serde(default)]
    pub test_per_class: Option<usize>,
    #[serde(default)]
    pub train_dir: Option<PathBuf>,
    #[serde(default)]
    pub test_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub widths: [usize; 3],
    pub train: ClassifierTrainConfig,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            train: ClassifierTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurifierSection {
    pub variant: PurifierVariant,
    pub widths: [usize; 5],
    pub critic_widths: [usize; 3],
    pub pretrain: PretrainConfig,
}

impl Default for PurifierSection {
    fn default() -> Self {
        Self {
            variant: PurifierVariant::Gan,
            widths: [16, 32, 32, 64, 64],
            critic_widths: [16, 32, 64],
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub subset: usize,
    pub repeats: usize,
    /// Transforms of the benchmark matrix; empty means `[transform]` alone.
    pub transforms: Vec<TransformConfig>,
    /// Also evaluate the fine-tuned purifier.
    pub with_atop: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            subset: EVAL_SUBSET,
            repeats: 2,
            transforms: Vec::new(),
            with_atop: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub param: SweepParam,
    pub values: Vec<f64>,
    /// Id of an entry of `attacks` (e.g. "PGD-10"); standard accuracy only
    /// when absent.
    #[serde(default)]
    pub attack: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    pub master: u64,
}

impl ExperimentConfig {
    /// Reads `path`, applies `--set` overrides and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::Missing(path.to_path_buf())
            } else {
                CliError::Runtime(format!("{}: {e}", path.display()))
            }
        })?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Schema(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Schema(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not depend on the loaded data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Schema(m));
        if self.version != SCHEMA_VERSION {
            return bad(format!(
                "config version {} is not supported (expected {SCHEMA_VERSION})",
                self.version
            ));
        }
        let d = &self.dataset;
        match (&d.synthetic, &d.train_dir, &d.test_dir) {
            (Some(_), None, None) => {}
            (None, Some(_), Some(_)) => {
                if d.test_per_class.is_some() {
                    return bad("dataset.test_per_class only applies to synthetic data".into());
                }
            }
            _ => return bad("dataset needs either [dataset.synthetic] or both train_dir and test_dir".into()),
        }
        if self.eval.subset == 0 {
            return bad("eval.subset must be at least 1".into());
        }
        if self.eval.repeats < 2 {
            return bad("eval.repeats must be at least 2 for randomized pipelines".into());
        }
        let mut ids = Vec::new();
        for a in &self.attacks {
            a.validate()?;
            if ids.contains(&a.id()) {
                return bad(format!("attack {} is listed twice", a.id()));
            }
            ids.push(a.id());
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return bad("sweep.values must not be empty".into());
            }
            if let Some(id) = &s.attack {
                if !ids.contains(id) {
                    return bad(format!("sweep.attack {id} is not one of the configured attacks"));
                }
            }
        }
        if let Some(spec) = &d.synthetic {
            self.validate_shape(spec.height, spec.width)?;
        }
        Ok(())
    }

    /// Checks that depend on the image size.
    pub fn validate_shape(&self, height: usize, width: usize) -> Result<(), CliError> {
        self.transform.validate(height, width)?;
        for t in &self.eval.transforms {
            t.validate(height, width)?;
        }
        for t in &self.purifier.pretrain.transforms {
            t.validate(height, width)?;
        }
        self.atop.validate(height, width)?;
        Ok(())
    }

    /// Hash of everything except the seeds, so runs of one experiment with
    /// different seeds sit side by side.
    pub fn hash(&self) -> Result<String, CliError> {
        let mut v = serde_json::to_value(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("seeds");
        }
        Ok(config_hash(&v)?)
    }

    /// `<hash12>-seed<seed>`
    pub fn run_dir_name(&self) -> Result<String, CliError> {
        Ok(format!("{}-seed{}", &self.hash()?[..12], self.seeds.master))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(format!("config serialization: {e}")))
    }
}

impl DatasetSection {
    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.train_dir, &mut self.test_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Applies one `section.key=value` override. The value is parsed as a TOML
/// value and falls back to a bare string; numeric path components index
/// into arrays (`attacks.0.eps=0.1`).
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Schema(format!("override {spec:?} is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Schema(format!("override {spec:?} has an empty key")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = keys.split_last().unwrap();
    let mut root = toml::Value::Table(std::mem::take(table));
    let set = || {
        let mut cur = &mut root;
        for k in parents {
            cur = step(cur, k, spec)?;
        }
        match cur {
            toml::Value::Table(t) => {
                t.insert(last.to_string(), value);
            }
            toml::Value::Array(a) => {
                let i = index(a, last, spec)?;
                a[i] = value;
            }
            _ => return Err(CliError::Schema(format!("override {spec:?}: parent is not a table"))),
        }
        Ok(())
    };
    let res = set();
    if let toml::Value::Table(t) = root {
        *table = t;
    }
    res
}

fn step<'a>(v: &'a mut toml::Value, key: &str, spec: &str) -> Result<&'a mut toml::Value, CliError> {
    match v {
        toml::Value::Table(t) => Ok(t.entry(key).or_insert_with(|| toml::Value::Table(toml::Table::new()))),
        toml::Value::Array(a) => {
            let i = index(a, key, spec)?;
            Ok(&mut a[i])
        }
        _ => Err(CliError::Schema(format!(
            "override {spec:?}: {key} is not inside a table"
        ))),
    }
}

fn index(a: &[toml::Value], key: &str, spec: &str) -> Result<usize, CliError> {
    key.parse::<usize>()
        .ok()
        .filter(|&i| i < a.len())
        .ok_or_else(|| CliError::Schema(format!("override {spec:?}: no element {key}")))
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
