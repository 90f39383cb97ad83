//! One function per subcommand. Every stage reads its prerequisites from
//! and writes its artifacts into the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use atop_core::attacks::{attack_suite, AttackConfig};
use atop_core::data::{load_image_dataset, make_synthetic_dataset, sample_eval_subset, LabeledDataset};
use atop_core::evaluation::{
    run_benchmark, tradeoff_sweep, write_sweep_csv, BenchmarkConfig, EvalReport, PurifierEntry,
};
use atop_core::models::{
    load_checkpoint, purify_with_draw, save_checkpoint, Checkpoint, ClassifierArch, ClassifierNet, DiscriminatorArch,
    DiscriminatorNet, Pipeline, PurifierArch, PurifierNet, PurifierVariant,
};
use atop_core::training::{finetune_atop, pretrain_purifier, train_classifier, write_log_csv, EpochEnd};
use atop_core::transforms::TransformDraw;
use atop_core::SeededRng;
use atop_tensor::Tensor;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::grid::Grid;

pub const CLASSIFIER: &str = "classifier.ckpt";
pub const PURIFIER: &str = "purifier.ckpt";
pub const CRITIC: &str = "critic.ckpt";
pub const ATOP_DIR: &str = "atop";

/// A loaded config bound to its run directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub rng: SeededRng,
}

impl Run {
    /// Creates `<root>/<hash>-seed<seed>/` and records the resolved config
    /// and provenance in it.
    pub fn create(cfg: ExperimentConfig, root: &Path, command: &str) -> Result<Self, CliError> {
        let dir = root.join(cfg.run_dir_name()?);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write(&dir.join("config.toml"), &cfg.to_toml()?)?;
        let provenance = json!({
            "command": command,
            "seed": cfg.seeds.master,
            "config_hash": cfg.hash()?,
            "schema_version": cfg.version,
            "tool_version": env!("CARGO_PKG_VERSION"),
        });
        write(
            &dir.join(format!("provenance-{command}.json")),
            &serde_json::to_string_pretty(&provenance).unwrap(),
        )?;
        let rng = SeededRng::new(cfg.seeds.master);
        Ok(Self { cfg, dir, rng })
    }

    fn seed(&self) -> u64 {
        self.cfg.seeds.master
    }

    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset), CliError> {
        let d = &self.cfg.dataset;
        let (train, test) = match (&d.synthetic, &d.train_dir, &d.test_dir) {
            (Some(spec), _, _) => {
                let mut test_spec = spec.clone();
                test_spec.per_class = d.test_per_class.unwrap_or(spec.per_class);
                (
                    make_synthetic_dataset(&mut self.rng.derive("data/train"), spec)?,
                    make_synthetic_dataset(&mut self.rng.derive("data/test"), &test_spec)?,
                )
            }
            (None, Some(tr), Some(te)) => (load_image_dataset(tr, None)?, load_image_dataset(te, None)?),
            _ => unreachable!("validated config"),
        };
        if train.image_shape() != test.image_shape() || train.meta().classes != test.meta().classes {
            return Err(CliError::Schema(
                "train and test datasets differ in shape or classes".into(),
            ));
        }
        let [_, h, w] = train.image_shape();
        self.cfg.validate_shape(h, w)?;
        Ok((train, test))
    }

    /// The evaluation subset shared by `attack`, `sweep`, `render-grid` and
    /// the benchmark of `evaluate`.
    fn eval_subset(&self, test: &LabeledDataset) -> Result<LabeledDataset, CliError> {
        let n = self.cfg.eval.subset.min(test.len());
        Ok(sample_eval_subset(test, n, &mut self.rng.derive("subset"))?)
    }

    fn path(&self, atop: bool, name: &str) -> PathBuf {
        if atop {
            self.dir.join(ATOP_DIR).join(name)
        } else {
            self.dir.join(name)
        }
    }

    fn require(&self, path: PathBuf) -> Result<PathBuf, CliError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::Missing(path))
        }
    }

    fn classifier(&self) -> Result<ClassifierNet<f32>, CliError> {
        let p = self.require(self.dir.join(CLASSIFIER))?;
        Ok(load_checkpoint(&p)?.into_classifier(None)?)
    }

    fn purifier(&self, atop: bool) -> Result<PurifierNet<f32>, CliError> {
        let p = self.require(self.path(atop, PURIFIER))?;
        Ok(load_checkpoint(&p)?.into_purifier(None)?)
    }

    fn critic(&self, variant: PurifierVariant) -> Result<Option<DiscriminatorNet<f32>>, CliError> {
        match variant {
            PurifierVariant::Ae => Ok(None),
            PurifierVariant::Gan => {
                let p = self.require(self.dir.join(CRITIC))?;
                Ok(Some(load_checkpoint(&p)?.into_discriminator(None)?))
            }
        }
    }

    fn attack(&self, id: &str) -> Result<&AttackConfig, CliError> {
        self.cfg
            .attacks
            .iter()
            .find(|a| a.id() == id)
            .ok_or_else(|| CliError::Schema(format!("no attack {id} in the config")))
    }

    fn adversarial_dir(&self, atop: bool, id: &str) -> PathBuf {
        self.dir
            .join("adversarial")
            .join(if atop { "atop" } else { "base" })
            .join(id)
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn hyper<S: serde::Serialize>(s: &S) -> serde_json::Value {
    serde_json::to_value(s).unwrap_or(serde_json::Value::Null)
}

pub fn train_classifier_cmd(run: &Run) -> Result<Vec<PathBuf>, CliError> {
    let (train, test) = run.load_data()?;
    let [c, h, _] = train.image_shape();
    let mut arch = ClassifierArch::new(c, h, train.meta().classes);
    arch.width = train.image_shape()[2];
    arch.widths = run.cfg.classifier.widths;
    let section = &run.cfg.classifier;
    let (net, log) = train_classifier(arch, &section.train, &train, &mut run.rng.derive("classifier"))?;
    let acc = atop_core::evaluation::undefended_accuracy(&net, &test)?;
    let ckpt = run.dir.join(CLASSIFIER);
    save_checkpoint(&Checkpoint::classifier(&net, hyper(section), run.seed()), &ckpt)?;
    let log_path = run.dir.join("classifier_log.csv");
    write_log_csv(&log, &log_path)?;
    eprintln!("classifier test accuracy {acc:.2}%");
    Ok(vec![ckpt, log_path])
}

pub fn pretrain_purifier_cmd(run: &Run) -> Result<Vec<PathBuf>, CliError> {
    let (train, _) = run.load_data()?;
    let [c, h, w] = train.image_shape();
    let section = &run.cfg.purifier;
    let mut rng = run.rng.derive("purifier");
    let mut arch = PurifierArch::new(section.variant, c, h);
    arch.width = w;
    arch.widths = section.widths;
    let purifier = PurifierNet::new(arch, &mut rng)?;
    let critic = match section.variant {
        PurifierVariant::Gan => {
            let mut d = DiscriminatorArch::new(c, h);
            d.width = w;
            d.widths = section.critic_widths;
            Some(DiscriminatorNet::new(d, &mut rng)?)
        }
        PurifierVariant::Ae => None,
    };
    let (seed, hp) = (run.seed(), hyper(section));
    let save = |e: &EpochEnd<'_>, dir: &Path| -> atop_core::Result<Vec<PathBuf>> {
        let mut out = vec![dir.join(PURIFIER)];
        save_checkpoint(&Checkpoint::purifier(e.purifier, hp.clone(), seed), &out[0])?;
        if let Some(d) = e.critic {
            out.push(dir.join(CRITIC));
            save_checkpoint(&Checkpoint::discriminator(d, hp.clone(), seed), &out[1])?;
        }
        Ok(out)
    };
    let outcome = pretrain_purifier(&section.pretrain, purifier, critic, &train, &mut rng, |e| {
        eprintln!("pretrain epoch {}", e.epoch);
        save(e, &run.dir).map(|_| ())
    })?;
    let mut paths = save(
        &EpochEnd {
            epoch: section.pretrain.epochs,
            purifier: &outcome.purifier,
            critic: outcome.critic.as_ref(),
        },
        &run.dir,
    )?;
    let log_path = run.dir.join("pretrain_log.csv");
    write_log_csv(&outcome.log, &log_path)?;
    paths.push(log_path);
    Ok(paths)
}

pub fn finetune_atop_cmd(run: &Run) -> Result<Vec<PathBuf>, CliError> {
    let classifier = run.classifier()?;
    let purifier = run.purifier(false)?;
    let critic = run.critic(purifier.arch.variant)?;
    let (train, _) = run.load_data()?;
    let cfg = &run.cfg.atop;
    let dir = run.dir.join(ATOP_DIR);
    let (seed, hp) = (run.seed(), hyper(cfg));
    let save = |e: &EpochEnd<'_>| -> atop_core::Result<Vec<PathBuf>> {
        let mut out = vec![dir.join(PURIFIER)];
        save_checkpoint(&Checkpoint::purifier(e.purifier, hp.clone(), seed), &out[0])?;
        if let Some(d) = e.critic {
            out.push(dir.join(CRITIC));
            save_checkpoint(&Checkpoint::discriminator(d, hp.clone(), seed), &out[1])?;
        }
        Ok(out)
    };
    let outcome = finetune_atop(
        cfg,
        purifier,
        critic,
        &classifier,
        &train,
        &mut run.rng.derive("atop"),
        |e| {
            eprintln!("finetune epoch {}", e.epoch);
            save(e).map(|_| ())
        },
    )?;
    let mut paths = save(&EpochEnd {
        epoch: cfg.epochs,
        purifier: &outcome.purifier,
        critic: outcome.critic.as_ref(),
    })?;
    let log_path = dir.join("finetune_log.csv");
    write_log_csv(&outcome.log, &log_path)?;
    paths.push(log_path);
    Ok(paths)
}

pub fn attack_cmd(run: &Run, atop: bool) -> Result<Vec<PathBuf>, CliError> {
    if run.cfg.attacks.is_empty() {
        return Err(CliError::Schema("no [[attacks]] configured".into()));
    }
    let classifier = run.classifier()?;
    let purifier = run.purifier(atop)?;
    let (_, test) = run.load_data()?;
    let subset = run.eval_subset(&test)?;
    let pipe = Pipeline::new(Some(run.cfg.transform.clone()), &purifier, &classifier);
    let suite = attack_suite(&pipe, &subset, &run.cfg.attacks, 64, &run.rng.derive("attack"))?;
    let mut paths = Vec::new();
    for (id, set) in suite {
        let dir = run.adversarial_dir(atop, &id);
        set.save(&dir)?;
        let provenance = json!({"seed": run.seed(), "stream_seed": set.seed, "atop": atop});
        write(&dir.join("provenance.json"), &provenance.to_string())?;
        paths.push(dir);
    }
    Ok(paths)
}

/// The benchmark matrix of the config over the checkpoints of this run.
pub fn benchmark_config(run: &Run) -> BenchmarkConfig {
    let cfg = &run.cfg;
    let mut b = BenchmarkConfig::new(cfg.seeds.master, run.dir.join(CLASSIFIER));
    b.subset = cfg.eval.subset;
    b.repeats = cfg.eval.repeats;
    b.transforms = if cfg.eval.transforms.is_empty() {
        vec![cfg.transform.clone()]
    } else {
        cfg.eval.transforms.clone()
    };
    b.attacks = cfg.attacks.clone();
    let kinds: Vec<_> = b.transforms.iter().map(|t| t.kind).collect();
    for atop in [false, true] {
        if atop && !cfg.eval.with_atop {
            continue;
        }
        for &kind in &kinds {
            b.purifiers.push(PurifierEntry {
                transform: kind,
                atop,
                checkpoint: run.path(atop, PURIFIER),
            });
        }
    }
    b
}

pub fn evaluate_cmd(run: &Run) -> Result<(Vec<PathBuf>, EvalReport), CliError> {
    let b = benchmark_config(run);
    run.require(b.classifier.clone())?;
    for p in &b.purifiers {
        run.require(p.checkpoint.clone())?;
    }
    let (_, test) = run.load_data()?;
    let out = run.dir.join("reports");
    let report = run_benchmark(&b, &test, Some(&out))?;
    let stem = report.file_stem();
    for r in &report.rows {
        let robust = r.robust_acc.map_or("-".to_string(), |a| {
            format!("{a:.2} +- {:.2}", r.robust_stderr.unwrap_or(0.0))
        });
        eprintln!(
            "{:<4} atop={:<5} {:<10} standard {:.2} +- {:.2}  robust {robust}",
            r.transform, r.atop, r.attack, r.standard_acc, r.standard_stderr
        );
    }
    Ok((
        vec![out.join(format!("{stem}.csv")), out.join(format!("{stem}.json"))],
        report,
    ))
}

pub fn sweep_cmd(run: &Run, atop: bool) -> Result<Vec<PathBuf>, CliError> {
    let sweep = run
        .cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Schema("no [sweep] section in the config".into()))?;
    let attack = sweep.attack.as_deref().map(|id| run.attack(id)).transpose()?;
    let classifier = run.classifier()?;
    let purifier = run.purifier(atop)?;
    let (_, test) = run.load_data()?;
    let subset = run.eval_subset(&test)?;
    let records = tradeoff_sweep(
        sweep.param,
        &sweep.values,
        &run.cfg.transform,
        &purifier,
        &classifier,
        attack,
        &subset,
        &run.rng.derive("sweep"),
        run.cfg.eval.repeats,
    )?;
    let path = run.path(atop, "sweep.csv");
    write_sweep_csv(&records, &path)?;
    Ok(vec![path])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Clean,
    Adversarial,
    Transformed,
    Purified,
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "clean" => Ok(Stage::Clean),
            "adversarial" => Ok(Stage::Adversarial),
            "transformed" => Ok(Stage::Transformed),
            "purified" => Ok(Stage::Purified),
            _ => Err(format!(
                "unknown stage {s:?} (expected clean, adversarial, transformed or purified)"
            )),
        }
    }
}

pub struct GridRequest {
    pub examples: Vec<usize>,
    pub stages: Vec<Stage>,
    /// Attack id whose stored examples fill the adversarial column.
    pub attack: Option<String>,
    pub atop: bool,
    pub out: Option<PathBuf>,
}

/// Renders the requested stages for examples of the evaluation subset.
/// With the adversarial stage selected, the transformed and purified
/// columns are repeated for the adversarial input under the same transform
/// draw, so clean and adversarial purifications sit side by side.
pub fn render_grid_cmd(run: &Run, req: &GridRequest) -> Result<Vec<PathBuf>, CliError> {
    if req.examples.is_empty() || req.stages.is_empty() {
        return Err(CliError::Schema("empty selection".into()));
    }
    let has = |s: Stage| req.stages.contains(&s);
    let (_, test) = run.load_data()?;
    let subset = run.eval_subset(&test)?;
    if let Some(&i) = req.examples.iter().find(|&&i| i >= subset.len()) {
        return Err(CliError::Schema(format!(
            "example {i} is outside the evaluation subset of {}",
            subset.len()
        )));
    }
    let clean = subset.images().select(&req.examples);
    let adversarial = if has(Stage::Adversarial) {
        let id = req
            .attack
            .clone()
            .or_else(|| run.cfg.attacks.first().map(AttackConfig::id))
            .ok_or_else(|| CliError::Schema("the adversarial stage needs an attack".into()))?;
        run.attack(&id)?;
        let dir = run.require(run.adversarial_dir(req.atop, &id))?;
        let adv = load_image_dataset(&dir, None)?;
        if adv.len() != subset.len() {
            return Err(CliError::Runtime(format!(
                "{} holds {} examples but the evaluation subset has {}",
                dir.display(),
                adv.len(),
                subset.len()
            )));
        }
        Some(adv.images().select(&req.examples))
    } else {
        None
    };
    let purifier = if has(Stage::Purified) {
        Some(run.purifier(req.atop)?)
    } else {
        None
    };
    let (n, c, h, w) = clean.dims4();
    let draw = TransformDraw::sample(&run.cfg.transform, [n, c, h, w], &mut run.rng.derive("grid"))?;

    let derived = |prefix: &str, x: &Tensor<f32>| -> Result<Vec<(String, Tensor<f32>)>, CliError> {
        let mut cols = Vec::new();
        if has(Stage::Transformed) {
            cols.push((
                format!("{prefix}{}", run.cfg.transform.kind),
                draw.apply(x)?.views[0].clone(),
            ));
        }
        if let Some(p) = &purifier {
            cols.push((format!("{prefix}purified"), purify_with_draw(x, Some(&draw), p)?));
        }
        Ok(cols)
    };
    let mut columns: Vec<(String, Tensor<f32>)> = Vec::new();
    if has(Stage::Clean) {
        columns.push(("clean".into(), clean.clone()));
    }
    columns.extend(derived("", &clean)?);
    if let Some(adv) = &adversarial {
        columns.push(("adversarial".into(), adv.clone()));
        columns.extend(derived("adv ", adv)?);
    }
    let grid = Grid {
        labels: columns.iter().map(|(l, _)| l.clone()).collect(),
        cells: (0..n)
            .map(|i| columns.iter().map(|(_, t)| t.batch_range(i..i + 1)).collect())
            .collect(),
    };
    let out = req.out.clone().unwrap_or_else(|| run.dir.join("grid.png"));
    grid.render()?.save_png(&out)?;
    Ok(vec![out])
}
