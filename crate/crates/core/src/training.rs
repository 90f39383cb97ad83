//! Classifier training, purifier pretraining under its original loss, and
//! adversarial fine-tuning of the purifier against a frozen classifier.

use std::f64::consts::PI;
use std::path::Path;

use atop_tensor::{Element, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackConfig, EPS_8};
use crate::data::{batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{
    argmax_rows, purify_on_graph, Bound, ClassifierArch, ClassifierNet, Critic, DiscriminatorNet, Params, Pipeline,
    PurifierGrad, PurifierNet, PurifierVariant,
};
use crate::rng::SeededRng;
use crate::transforms::{TransformConfig, TransformDraw, TransformKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMethod {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: OptimizerMethod,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            method: OptimizerMethod::Sgd,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            method: OptimizerMethod::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "momentum must lie in [0, 1) and weight_decay be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// First-order optimizer state for one parameter set.
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    total_steps: usize,
    t: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, params: &Params<T>, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Ok(Self {
            cfg,
            total_steps: total_steps.max(1),
            t: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn current_lr(&self) -> f64 {
        match self.cfg.schedule {
            Schedule::Constant => self.cfg.lr,
            Schedule::Cosine => {
                let frac = (self.t as f64 / self.total_steps as f64).min(1.0);
                self.cfg.lr * 0.5 * (1.0 + (PI * frac).cos())
            }
        }
    }

    /// One descent step; `None` gradients count as zero.
    pub fn step(&mut self, params: &mut Params<T>, grads: &[Option<Tensor<T>>]) {
        let lr = T::from_f64_lossy(self.current_lr());
        let wd = T::from_f64_lossy(self.cfg.weight_decay);
        let mom = T::from_f64_lossy(self.cfg.momentum);
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let c1 = T::from_f64_lossy(1.0 - b1.powi(self.t as i32));
        let c2 = T::from_f64_lossy(1.0 - b2.powi(self.t as i32));
        let (b1, b2, eps) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2), T::from_f64_lossy(eps));
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let Some(grad) = grads.get(i).and_then(|g| g.as_ref()) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let gj = grad.data()[j] + wd * pd[j];
                match self.cfg.method {
                    OptimizerMethod::Sgd => {
                        md[j] = mom * md[j] + gj;
                        pd[j] = pd[j] - lr * md[j];
                    }
                    OptimizerMethod::Adam => {
                        md[j] = b1 * md[j] + (T::one() - b1) * gj;
                        vd[j] = b2 * vd[j] + (T::one() - b2) * gj * gj;
                        pd[j] = pd[j] - lr * (md[j] / c1) / ((vd[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// The three parts of the discriminator-based loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DfParts {
    /// `E[D(x_in)]`
    pub real: f64,
    /// `E[D(purified)]`
    pub fake: f64,
    /// Mean over images of the per-image summed l1 distance.
    pub l1: f64,
}

impl DfParts {
    pub fn total(&self) -> f64 {
        self.real - self.fake + self.l1
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_org: f64,
    pub l_cls: f64,
    pub df: Option<DfParts>,
}

/// Graph handles of [`loss_df`].
pub struct DfVars {
    pub total: Var,
    pub real: Var,
    pub fake: Var,
    pub l1: Var,
}

fn same_shape<T: Element>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    Ok(())
}

/// `E[D(x_in)] - E[D(purified)] + E[||x_in - purified||_1]`.
pub fn loss_df<T: Element>(g: &mut Graph<T>, x_in: Var, purified: Var, critic: &dyn Critic<T>) -> Result<DfVars> {
    same_shape(g, x_in, purified, "loss_df")?;
    let n = T::from_usize(g.value(x_in).shape()[0]).unwrap();
    let sr = critic.score(g, x_in)?;
    let real = g.mean(sr);
    let sf = critic.score(g, purified)?;
    let fake = g.mean(sf);
    let d = g.sub(x_in, purified);
    let a = g.abs(d);
    let s = g.sum(a);
    let l1 = g.scale(s, T::one() / n);
    let gap = g.sub(real, fake);
    let total = g.add(gap, l1);
    Ok(DfVars { total, real, fake, l1 })
}

/// Evaluates [`loss_df`] on concrete images.
pub fn loss_df_value<T: Element>(x_in: &Tensor<T>, purified: &Tensor<T>, critic: &dyn Critic<T>) -> Result<DfParts> {
    let mut g = Graph::new();
    let a = g.constant(x_in.clone());
    let b = g.constant(purified.clone());
    let v = loss_df(&mut g, a, b, critic)?;
    let f = |v: Var| g.value(v).item().to_f64_lossy();
    Ok(DfParts {
        real: f(v.real),
        fake: f(v.fake),
        l1: f(v.l1),
    })
}

/// Mean squared error over missing pixels. `keep` is the `[N, 1, H, W]`
/// keep-mask shared by all channels.
pub fn loss_mae<T: Element>(g: &mut Graph<T>, x: Var, reconstruction: Var, keep: &Tensor<T>) -> Result<Var> {
    same_shape(g, x, reconstruction, "loss_mae")?;
    let (n, c, h, w) = g.value(x).dims4();
    if keep.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!(
            "mask must be [{n}, 1, {h}, {w}], got {:?}",
            keep.shape()
        )));
    }
    let hw = h * w;
    let missing = Tensor::from_fn(vec![n, c, h, w], |i| {
        T::one() - keep.data()[(i / (c * hw)) * hw + i % hw]
    });
    let count = missing.sum();
    if count == T::zero() {
        return Err(Error::InvalidConfig("mask has no missing pixels".into()));
    }
    let d = g.sub(x, reconstruction);
    let sq = g.mul(d, d);
    let wsq = g.mul_const(sq, missing);
    let s = g.sum(wsq);
    Ok(g.scale(s, T::one() / count))
}

/// Keep-mask of the final purified image: RT1/RT2 keep what the mask kept,
/// RT3 reconstructs every pixel, no transform keeps everything.
pub fn output_keep_mask<T: Element>(draw: Option<&TransformDraw>, shape: [usize; 4]) -> Tensor<T> {
    let [n, _, h, w] = shape;
    match draw {
        None => Tensor::ones(vec![n, 1, h, w]),
        Some(d) if d.kind == TransformKind::Rt3 => Tensor::zeros(vec![n, 1, h, w]),
        Some(d) => d.mask_tensor(0, 1),
    }
}

/// Graph handles and values of [`loss_atop`].
pub struct AtopGraph {
    pub total: Var,
    pub purified: Var,
    pub logits: Option<Var>,
    pub classifier_vars: Vec<Var>,
    pub breakdown: LossBreakdown,
}

/// `L_org(x', theta_g) + lambda * CE(y, f(g(t(x'))))` for a fixed draw.
///
/// `L_org` is [`loss_df`] for the GAN variant and [`loss_mae`] for the AE
/// variant. The classifier is bound as constants; without one the
/// classification term is skipped and `lambda` must be 0.
#[allow(clippy::too_many_arguments)]
pub fn loss_atop<T: Element>(
    g: &mut Graph<T>,
    x_prime: &Tensor<T>,
    y: &[usize],
    draw: Option<&TransformDraw>,
    purifier: &Bound<'_, PurifierNet<T>>,
    critic: Option<&DiscriminatorNet<T>>,
    classifier: Option<&ClassifierNet<T>>,
    lambda: f64,
) -> Result<AtopGraph> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    let (n, c, h, w) = x_prime.dims4();
    if y.len() != n {
        return Err(Error::Shape(format!("{n} images but {} labels", y.len())));
    }
    let xv = g.constant(x_prime.clone());
    let purified = purify_on_graph(g, xv, draw, purifier, PurifierGrad::Exact)?;
    let (l_org, df) = match purifier.net.arch.variant {
        PurifierVariant::Gan => {
            let d = critic.ok_or_else(|| Error::InvalidConfig("the GAN variant needs a discriminator".into()))?;
            let v = loss_df(g, xv, purified, d)?;
            let f = |v: Var| g.value(v).item().to_f64_lossy();
            let parts = DfParts {
                real: f(v.real),
                fake: f(v.fake),
                l1: f(v.l1),
            };
            (v.total, Some(parts))
        }
        PurifierVariant::Ae => {
            let keep = output_keep_mask(draw, [n, c, h, w]);
            (loss_mae(g, xv, purified, &keep)?, None)
        }
    };
    let (total, logits, classifier_vars, l_cls) = match classifier {
        Some(f) => {
            let bound = f.bind(g, false);
            let logits = crate::models::Classifier::logits(&bound, g, purified)?;
            if y.iter().any(|&l| l >= f.arch.classes) {
                return Err(Error::LabelRange {
                    label: *y.iter().max().unwrap(),
                    classes: f.arch.classes,
                });
            }
            let ce = g.cross_entropy(logits, y);
            let weighted = g.scale(ce, T::from_f64_lossy(lambda));
            let total = g.add(l_org, weighted);
            let l_cls = g.value(ce).item().to_f64_lossy();
            (total, Some(logits), bound.vars, l_cls)
        }
        None if lambda > 0.0 => {
            return Err(Error::InvalidConfig("lambda > 0 needs a classifier".into()));
        }
        None => (l_org, None, Vec::new(), 0.0),
    };
    let breakdown = LossBreakdown {
        total: g.value(total).item().to_f64_lossy(),
        l_org: g.value(l_org).item().to_f64_lossy(),
        l_cls,
        df,
    };
    Ok(AtopGraph {
        total,
        purified,
        logits,
        classifier_vars,
        breakdown,
    })
}

/// One row of a training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub l_org: f64,
    pub l_cls: f64,
    pub df_real: Option<f64>,
    pub df_fake: Option<f64>,
    pub df_l1: Option<f64>,
    /// Critic objective `E[D(real)] - E[D(fake)]` after its update.
    pub critic_gap: Option<f64>,
    /// Fraction of the batch misclassified through the pipeline.
    pub attack_success: Option<f64>,
}

pub fn write_log_csv<R: Serialize>(records: &[R], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_finite(v: f64, epoch: usize, step: usize, what: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step,
            what,
            value: v,
        })
    }
}

fn collect_grads<T: Element>(g: &Graph<T>, root: Var, vars: &[Var]) -> Vec<Option<Tensor<T>>> {
    let mut grads = g.backward(root);
    vars.iter().map(|v| grads.take(*v)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            optimizer: OptimizerConfig {
                momentum: 0.9,
                weight_decay: 5e-4,
                schedule: Schedule::Cosine,
                ..OptimizerConfig::sgd(0.05)
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

fn check_epochs(epochs: usize, batch_size: usize, data: &LabeledDataset) -> Result<()> {
    if epochs == 0 || batch_size == 0 {
        return Err(Error::InvalidConfig("epochs and batch_size must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(())
}

/// Plain cross-entropy training of a fresh classifier.
pub fn train_classifier(
    arch: ClassifierArch,
    cfg: &ClassifierTrainConfig,
    data: &LabeledDataset,
    rng: &mut SeededRng,
) -> Result<(ClassifierNet<f32>, Vec<ClassifierEpoch>)> {
    check_epochs(cfg.epochs, cfg.batch_size, data)?;
    let mut net = ClassifierNet::new(arch, rng)?;
    let steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &net.params, steps)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in batches(data, cfg.batch_size, rng, true)? {
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let x = g.constant(batch.images.clone());
            let logits = crate::models::Classifier::logits(&bound, &mut g, x)?;
            let loss = g.cross_entropy(logits, &batch.labels);
            let lv = g.value(loss).item() as f64;
            check_finite(lv, epoch, step, "classifier loss")?;
            loss_sum += lv * batch.len() as f64;
            correct += argmax_rows(g.value(logits))
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p == y)
                .count();
            let grads = collect_grads(&g, loss, &bound.vars);
            opt.step(&mut net.params, &grads);
            step += 1;
        }
        log.push(ClassifierEpoch {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    if !net.params.all_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            step,
            what: "classifier parameters",
            value: f64::NAN,
        });
    }
    Ok((net, log))
}

/// Mutable state of one purifier training run.
struct PurifierTrainer<'a> {
    purifier: &'a mut PurifierNet<f32>,
    critic: Option<&'a mut DiscriminatorNet<f32>>,
    opt_g: Optimizer<f32>,
    opt_d: Option<Optimizer<f32>>,
    critic_clip: f32,
}

/// What one call of [`PurifierTrainer::step`] trains on.
struct StepInput<'a> {
    x: &'a Tensor<f32>,
    y: &'a [usize],
    draw: Option<&'a TransformDraw>,
    classifier: Option<&'a ClassifierNet<f32>>,
    lambda: f64,
    epoch: usize,
    step: usize,
}

impl PurifierTrainer<'_> {
    /// Generator descent on the loss, then (GAN, unless frozen) one critic
    /// ascent step on the score gap with the pre-update purified images.
    fn step(&mut self, inp: &StepInput<'_>) -> Result<StepRecord> {
        let (breakdown, grads, purified, logits) = {
            let mut g = Graph::new();
            let bound = self.purifier.bind(&mut g, true);
            let out = loss_atop(
                &mut g,
                inp.x,
                inp.y,
                inp.draw,
                &bound,
                self.critic.as_deref(),
                inp.classifier,
                inp.lambda,
            )?;
            check_finite(out.breakdown.total, inp.epoch, inp.step, "purifier loss")?;
            let grads = collect_grads(&g, out.total, &bound.vars);
            let logits = out.logits.map(|l| g.value(l).clone());
            (out.breakdown, grads, g.value(out.purified).clone(), logits)
        };
        self.opt_g.step(&mut self.purifier.params, &grads);
        if !self.purifier.params.all_finite() {
            return Err(Error::Diverged {
                epoch: inp.epoch,
                step: inp.step,
                what: "purifier parameters",
                value: f64::NAN,
            });
        }
        let mut critic_gap = None;
        if let (Some(critic), Some(opt_d)) = (self.critic.as_deref_mut(), self.opt_d.as_mut()) {
            let (gap, grads) = {
                let mut g = Graph::new();
                let bound = critic.bind(&mut g, true);
                let real = g.constant(inp.x.clone());
                let fake = g.constant(purified);
                let sr = bound.score(&mut g, real)?;
                let sr = g.mean(sr);
                let sf = bound.score(&mut g, fake)?;
                let sf = g.mean(sf);
                let gap = g.sub(sr, sf);
                let obj = g.scale(gap, -1.0);
                (g.value(gap).item() as f64, collect_grads(&g, obj, &bound.vars))
            };
            check_finite(gap, inp.epoch, inp.step, "critic gap")?;
            opt_d.step(&mut critic.params, &grads);
            critic.clip_weights(self.critic_clip);
            critic_gap = Some(gap);
        }
        let attack_success = logits.map(|l| {
            let wrong = argmax_rows(&l).iter().zip(inp.y).filter(|(p, y)| p != y).count();
            wrong as f64 / inp.y.len() as f64
        });
        Ok(StepRecord {
            step: inp.step,
            epoch: inp.epoch,
            total: breakdown.total,
            l_org: breakdown.l_org,
            l_cls: breakdown.l_cls,
            df_real: breakdown.df.map(|d| d.real),
            df_fake: breakdown.df.map(|d| d.fake),
            df_l1: breakdown.df.map(|d| d.l1),
            critic_gap,
            attack_success,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Cycled batch by batch, so one purifier can serve several transforms.
    pub transforms: Vec<TransformConfig>,
    pub optimizer: OptimizerConfig,
    pub critic_optimizer: OptimizerConfig,
    /// Critic weights are clipped to `[-c, c]` after every update.
    pub critic_clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            transforms: vec![
                TransformConfig::new(TransformKind::Rt1),
                TransformConfig::new(TransformKind::Rt2),
            ],
            optimizer: OptimizerConfig::adam(1e-3),
            critic_optimizer: OptimizerConfig::adam(1e-4),
            critic_clip: 0.01,
        }
    }
}

fn check_clip(c: f64) -> Result<()> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidConfig(format!("critic_clip must be positive, got {c}")));
    }
    Ok(())
}

/// Pretrained purifier, its critic (GAN only) and the per-step log.
pub struct PurifierOutcome {
    pub purifier: PurifierNet<f32>,
    pub critic: Option<DiscriminatorNet<f32>>,
    pub log: Vec<StepRecord>,
}

/// Passed to the per-epoch callback of the purifier loops.
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub purifier: &'a PurifierNet<f32>,
    pub critic: Option<&'a DiscriminatorNet<f32>>,
}

/// Trains `purifier` (and `critic` for the GAN variant) on transformed clean
/// images under the original loss.
pub fn pretrain_purifier(
    cfg: &PretrainConfig,
    mut purifier: PurifierNet<f32>,
    mut critic: Option<DiscriminatorNet<f32>>,
    data: &LabeledDataset,
    rng: &mut SeededRng,
    mut on_epoch: impl FnMut(&EpochEnd<'_>) -> Result<()>,
) -> Result<PurifierOutcome> {
    check_epochs(cfg.epochs, cfg.batch_size, data)?;
    check_clip(cfg.critic_clip)?;
    if cfg.transforms.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one pretraining transform is required".into(),
        ));
    }
    let [_, h, w] = data.image_shape();
    for t in &cfg.transforms {
        t.validate(h, w)?;
    }
    check_critic(&purifier, critic.as_ref())?;
    let steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let opt_g = Optimizer::new(cfg.optimizer.clone(), &purifier.params, steps)?;
    let opt_d = match &critic {
        Some(d) => Some(Optimizer::new(cfg.critic_optimizer.clone(), &d.params, steps)?),
        None => None,
    };
    let mut log = Vec::new();
    let mut trainer = PurifierTrainer {
        purifier: &mut purifier,
        critic: critic.as_mut(),
        opt_g,
        opt_d,
        critic_clip: cfg.critic_clip as f32,
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in batches(data, cfg.batch_size, rng, true)? {
            let t = &cfg.transforms[step % cfg.transforms.len()];
            let draw = TransformDraw::sample(t, batch_shape(&batch.images), rng)?;
            log.push(trainer.step(&StepInput {
                x: &batch.images,
                y: &batch.labels,
                draw: Some(&draw),
                classifier: None,
                lambda: 0.0,
                epoch,
                step,
            })?);
            step += 1;
        }
        on_epoch(&EpochEnd {
            epoch,
            purifier: trainer.purifier,
            critic: trainer.critic.as_deref(),
        })?;
    }
    Ok(PurifierOutcome { purifier, critic, log })
}

fn batch_shape(x: &Tensor<f32>) -> [usize; 4] {
    let (n, c, h, w) = x.dims4();
    [n, c, h, w]
}

fn check_critic(purifier: &PurifierNet<f32>, critic: Option<&DiscriminatorNet<f32>>) -> Result<()> {
    match (purifier.arch.variant, critic) {
        (PurifierVariant::Gan, None) => Err(Error::InvalidConfig("the GAN variant needs a discriminator".into())),
        (PurifierVariant::Ae, Some(_)) => Err(Error::InvalidConfig("the AE variant takes no discriminator".into())),
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainWith {
    Adversarial,
    Clean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Fresh examples for every batch against the current purifier.
    PerBatch,
    /// Examples generated once against the initial purifier.
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtopConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub attack_for_ft: AttackConfig,
    pub optimizer: OptimizerConfig,
    pub critic_optimizer: OptimizerConfig,
    pub critic_clip: f64,
    pub transform: TransformConfig,
    pub train_with: TrainWith,
    /// Keep the discriminator fixed during fine-tuning.
    pub freeze_critic: bool,
    pub attack_mode: AttackMode,
}

impl Default for AtopConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            epochs: 2,
            batch_size: 32,
            attack_for_ft: AttackConfig::fgsm(EPS_8).with_eot(1),
            optimizer: OptimizerConfig::sgd(1e-4),
            critic_optimizer: OptimizerConfig::adam(1e-4),
            critic_clip: 0.01,
            transform: TransformConfig::new(TransformKind::Rt2),
            train_with: TrainWith::Adversarial,
            freeze_critic: false,
            attack_mode: AttackMode::PerBatch,
        }
    }
}

impl AtopConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        check_clip(self.critic_clip)?;
        self.attack_for_ft.validate()?;
        self.optimizer.validate()?;
        self.critic_optimizer.validate()?;
        self.transform.validate(height, width)
    }
}

/// Fine-tuning result; `classifier_checksum` is the frozen classifier's
/// parameter digest, identical before and after.
pub struct FinetuneOutcome {
    pub purifier: PurifierNet<f32>,
    pub critic: Option<DiscriminatorNet<f32>>,
    pub log: Vec<StepRecord>,
    pub classifier_checksum: String,
}

/// Adversarial fine-tuning of the purifier with the classifier frozen. Each
/// batch builds `x'` with `cfg.attack_for_ft` against the current pipeline
/// (or uses `x` itself for clean training), then takes one purifier step on
/// the combined loss and, for the GAN variant, one critic step.
pub fn finetune_atop(
    cfg: &AtopConfig,
    mut purifier: PurifierNet<f32>,
    mut critic: Option<DiscriminatorNet<f32>>,
    classifier: &ClassifierNet<f32>,
    data: &LabeledDataset,
    rng: &mut SeededRng,
    mut on_epoch: impl FnMut(&EpochEnd<'_>) -> Result<()>,
) -> Result<FinetuneOutcome> {
    check_epochs(cfg.epochs, cfg.batch_size, data)?;
    let [_, h, w] = data.image_shape();
    cfg.validate(h, w)?;
    check_critic(&purifier, critic.as_ref())?;
    if classifier.arch.classes != data.meta().classes {
        return Err(Error::ArchMismatch(format!(
            "classifier has {} classes, data has {}",
            classifier.arch.classes,
            data.meta().classes
        )));
    }
    let checksum = classifier.params.checksum();
    let adversarial = cfg.train_with == TrainWith::Adversarial;
    let precomputed = if adversarial && cfg.attack_mode == AttackMode::Precomputed {
        let pipe = Pipeline::new(Some(cfg.transform.clone()), &purifier, classifier);
        let mut parts = Vec::new();
        for start in (0..data.len()).step_by(cfg.batch_size) {
            let end = (start + cfg.batch_size).min(data.len());
            let x = data.images().batch_range(start..end);
            parts.push(run_attack(
                &pipe,
                &x,
                &data.labels()[start..end],
                &cfg.attack_for_ft,
                rng,
            )?);
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Some(Tensor::concat_rows(&refs))
    } else {
        None
    };
    let steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let opt_g = Optimizer::new(cfg.optimizer.clone(), &purifier.params, steps)?;
    let opt_d = match (&critic, cfg.freeze_critic) {
        (Some(d), false) => Some(Optimizer::new(cfg.critic_optimizer.clone(), &d.params, steps)?),
        _ => None,
    };
    let mut log = Vec::new();
    let mut trainer = PurifierTrainer {
        purifier: &mut purifier,
        critic: critic.as_mut(),
        opt_g,
        opt_d,
        critic_clip: cfg.critic_clip as f32,
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in batches(data, cfg.batch_size, rng, true)? {
            let x_prime = match (&precomputed, adversarial) {
                (Some(all), _) => all.select(&batch.indices),
                (None, true) => {
                    let pipe = Pipeline::new(Some(cfg.transform.clone()), &*trainer.purifier, classifier);
                    run_attack(&pipe, &batch.images, &batch.labels, &cfg.attack_for_ft, rng)?
                }
                (None, false) => batch.images.clone(),
            };
            let draw = TransformDraw::sample(&cfg.transform, batch_shape(&x_prime), rng)?;
            log.push(trainer.step(&StepInput {
                x: &x_prime,
                y: &batch.labels,
                draw: Some(&draw),
                classifier: Some(classifier),
                lambda: cfg.lambda,
                epoch,
                step,
            })?);
            step += 1;
        }
        on_epoch(&EpochEnd {
            epoch,
            purifier: trainer.purifier,
            critic: trainer.critic.as_deref(),
        })?;
    }
    let after = classifier.params.checksum();
    if after != checksum {
        return Err(Error::InvalidConfig(
            "classifier parameters changed during fine-tuning".into(),
        ));
    }
    Ok(FinetuneOutcome {
        purifier,
        critic,
        log,
        classifier_checksum: after,
    })
}
