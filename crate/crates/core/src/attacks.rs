//! Gradient attacks on the full transform-purifier-classifier pipeline.
//!
//! Input gradients go through [`input_gradient`], which averages over `k`
//! independent transform draws (EOT) and optionally replaces the purifier
//! Jacobian by the identity (BPDA). FGSM, PGD, the CW margin attack and
//! StAdv are all built on it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use atop_tensor::{Element, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_image_dataset, LabeledDataset, RECORDS_PER_SHARD};
use crate::error::{Error, Result};
use crate::models::{Pipeline, PurifierGrad};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "FGSM")]
    Fgsm,
    #[serde(rename = "PGD")]
    Pgd,
    #[serde(rename = "CW")]
    Cw,
    #[serde(rename = "StAdv")]
    StAdv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "l_inf")]
    Linf,
    #[serde(rename = "l_2")]
    L2,
    #[serde(rename = "non_lp")]
    NonLp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub norm: Norm,
    /// Pixel units for l_p attacks; for StAdv, the flow cap as a fraction
    /// of the image side. Zero is the no-op attack.
    pub eps: f32,
    /// Per-iteration step; `None` means `eps / 4`.
    #[serde(default)]
    pub step: Option<f32>,
    #[serde(default = "one")]
    pub steps: usize,
    #[serde(default = "yes")]
    pub random_start: bool,
    #[serde(default = "yes")]
    pub bpda: bool,
    #[serde(default = "default_eot")]
    pub eot_k: usize,
    #[serde(default)]
    pub cw_kappa: f32,
    #[serde(default = "default_tau")]
    pub stadv_tau: f32,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_eot() -> usize {
    20
}
fn default_tau() -> f32 {
    0.05
}

/// `8/255`, the l_inf radius used throughout.
pub const EPS_8: f32 = 8.0 / 255.0;

impl AttackConfig {
    fn base(kind: AttackKind, norm: Norm, eps: f32, steps: usize) -> Self {
        Self {
            kind,
            norm,
            eps,
            step: None,
            steps,
            random_start: true,
            bpda: true,
            eot_k: default_eot(),
            cw_kappa: 0.0,
            stadv_tau: default_tau(),
        }
    }

    pub fn fgsm(eps: f32) -> Self {
        Self {
            random_start: false,
            ..Self::base(AttackKind::Fgsm, Norm::Linf, eps, 1)
        }
    }

    /// l_inf PGD with step `eps / 4` and a random start.
    pub fn pgd(eps: f32, steps: usize) -> Self {
        Self::base(AttackKind::Pgd, Norm::Linf, eps, steps)
    }

    pub fn pgd_l2(eps: f32, steps: usize) -> Self {
        Self::base(AttackKind::Pgd, Norm::L2, eps, steps)
    }

    /// PGD on the CW margin inside the l_inf ball.
    pub fn cw(eps: f32, steps: usize) -> Self {
        Self::base(AttackKind::Cw, Norm::Linf, eps, steps)
    }

    pub fn stadv(eps: f32, steps: usize) -> Self {
        Self {
            random_start: false,
            ..Self::base(AttackKind::StAdv, Norm::NonLp, eps, steps)
        }
    }

    pub fn with_eot(mut self, k: usize) -> Self {
        self.eot_k = k;
        self
    }

    pub fn with_bpda(mut self, bpda: bool) -> Self {
        self.bpda = bpda;
        self
    }

    pub fn with_step(mut self, step: f32) -> Self {
        self.step = Some(step);
        self
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    pub fn step_size(&self) -> f32 {
        self.step.unwrap_or(self.eps / 4.0)
    }

    pub fn estimator(&self) -> GradientEstimatorConfig {
        GradientEstimatorConfig {
            bpda: self.bpda,
            eot_k: self.eot_k,
        }
    }

    /// Short label such as `PGD-10` or `CW-100`.
    pub fn id(&self) -> String {
        let name = match self.kind {
            AttackKind::Fgsm => return "FGSM".into(),
            AttackKind::Pgd if self.norm == Norm::L2 => "PGD-L2",
            AttackKind::Pgd => "PGD",
            AttackKind::Cw => "CW",
            AttackKind::StAdv => "StAdv",
        };
        format!("{name}-{}", self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return bad(format!("eps must be >= 0, got {}", self.eps));
        }
        if self.steps < 1 {
            return bad("steps must be at least 1".into());
        }
        if self.eot_k < 1 {
            return bad("eot_k must be at least 1".into());
        }
        if let Some(s) = self.step {
            if !(s > 0.0) {
                return bad(format!("step must be positive, got {s}"));
            }
        }
        let ok = match self.kind {
            AttackKind::Fgsm | AttackKind::Cw => self.norm == Norm::Linf,
            AttackKind::Pgd => matches!(self.norm, Norm::Linf | Norm::L2),
            AttackKind::StAdv => self.norm == Norm::NonLp,
        };
        if !ok {
            return bad(format!("{:?} does not support norm {:?}", self.kind, self.norm));
        }
        if !(self.cw_kappa >= 0.0) || !(self.stadv_tau >= 0.0) {
            return bad("cw_kappa and stadv_tau must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientEstimatorConfig {
    /// Treat the purifier as the identity in the backward pass.
    pub bpda: bool,
    /// Transform draws averaged per gradient.
    pub eot_k: usize,
}

impl GradientEstimatorConfig {
    pub fn exact() -> Self {
        Self { bpda: false, eot_k: 1 }
    }

    fn mode(&self) -> PurifierGrad {
        if self.bpda {
            PurifierGrad::Bpda
        } else {
            PurifierGrad::Exact
        }
    }
}

/// Per-pixel displacement `[N, 2, H, W]` in pixels (channel 0 horizontal).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T>(pub Tensor<T>);

impl<T: Element> FlowField<T> {
    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Self(Tensor::zeros(vec![n, 2, h, w]))
    }

    pub fn is_finite(&self) -> bool {
        self.0.all_finite()
    }
}

/// The quantity an attack increases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    CrossEntropy,
    /// The negated CW margin `-max(z_y - max_{c != y} z_c, -kappa)`.
    NegMargin {
        kappa: f64,
    },
}

fn check_labels(y: &[usize], classes: usize) -> Result<()> {
    match y.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelRange { label, classes }),
        None => Ok(()),
    }
}

fn objective_on<T: Element>(g: &mut Graph<T>, logits: Var, y: &[usize], obj: Objective) -> Result<Var> {
    let classes = g.value(logits).shape()[1];
    check_labels(y, classes)?;
    Ok(match obj {
        Objective::CrossEntropy => g.cross_entropy(logits, y),
        Objective::NegMargin { kappa } => {
            let m = g.cw_margin(logits, y, T::from_f64_lossy(kappa));
            g.scale(m, -T::one())
        }
    })
}

/// Mean cross-entropy of `logits` `[N, C]` against `y`.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, y: &[usize]) -> Result<T> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = objective_on(&mut g, z, y, Objective::CrossEntropy)?;
    Ok(g.value(l).item())
}

/// Mean CW margin `max(z_y - max_{c != y} z_c, -kappa)`.
pub fn cw_margin<T: Element>(logits: &Tensor<T>, y: &[usize], kappa: f64) -> Result<T> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = objective_on(&mut g, z, y, Objective::NegMargin { kappa })?;
    Ok(-g.value(l).item())
}

/// An averaged gradient and the averaged objective it came from.
#[derive(Clone, Debug)]
pub struct GradientEstimate<T> {
    pub grad: Tensor<T>,
    pub objective: T,
}

/// `(1/k) sum_j grad_x objective(f(pipeline_j(x)), y)` over `k` independent
/// transform draws.
pub fn objective_gradient<T: Element>(
    pipeline: &Pipeline<'_, T>,
    x: &Tensor<T>,
    y: &[usize],
    objective: Objective,
    gcfg: &GradientEstimatorConfig,
    rng: &mut SeededRng,
) -> Result<GradientEstimate<T>> {
    if gcfg.eot_k < 1 {
        return Err(Error::InvalidConfig("eot_k must be at least 1".into()));
    }
    let (n, c, h, w) = x.dims4();
    if y.len() != n {
        return Err(Error::Shape(format!("{n} images but {} labels", y.len())));
    }
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut total = T::zero();
    for _ in 0..gcfg.eot_k {
        let draw = pipeline.sample_draw([n, c, h, w], rng)?;
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let logits = pipeline.logits(&mut g, xv, draw.as_ref(), gcfg.mode())?;
        let loss = objective_on(&mut g, logits, y, objective)?;
        total = total + g.value(loss).item();
        if let Some(d) = g.backward(loss).get(xv) {
            grad.add_assign(d);
        }
    }
    let k = T::from_usize(gcfg.eot_k).unwrap();
    let grad = grad.scale(T::one() / k);
    if !grad.all_finite() {
        return Err(Error::NonFinite("input gradient".into()));
    }
    Ok(GradientEstimate {
        grad,
        objective: total / k,
    })
}

/// EOT/BPDA estimate of the cross-entropy input gradient.
pub fn input_gradient<T: Element>(
    pipeline: &Pipeline<'_, T>,
    x: &Tensor<T>,
    y: &[usize],
    gcfg: &GradientEstimatorConfig,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    Ok(objective_gradient(pipeline, x, y, Objective::CrossEntropy, gcfg, rng)?.grad)
}

fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn clip01<T: Element>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// `clip(x + eps * sign(grad), 0, 1)`.
pub fn fgsm<T: Element>(
    pipeline: &Pipeline<'_, T>,
    x: &Tensor<T>,
    y: &[usize],
    eps: T,
    gcfg: &GradientEstimatorConfig,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    if !(eps >= T::zero()) {
        return Err(Error::InvalidConfig("eps must be >= 0".into()));
    }
    if eps == T::zero() {
        return Ok(x.clone());
    }
    let grad = input_gradient(pipeline, x, y, gcfg, rng)?;
    Ok(x.zip_map(&grad, |a, d| clip01(a + eps * sign(d))))
}

/// Projects `x_cand` onto the `eps`-ball around `x` in `norm`, then into
/// `[0, 1]`. The l_2 ball is per image.
pub fn project<T: Element>(x_cand: &Tensor<T>, x: &Tensor<T>, norm: Norm, eps: T) -> Result<Tensor<T>> {
    if x_cand.shape() != x.shape() {
        return Err(Error::Shape("projection of differently shaped images".into()));
    }
    match norm {
        Norm::Linf => Ok(x_cand.zip_map(x, |c, o| clip01(o + (c - o).max(-eps).min(eps)))),
        Norm::L2 => {
            let mut out = x_cand.clone();
            let per = x.sample_len();
            for (oc, o) in out.data_mut().chunks_mut(per).zip(x.data().chunks(per)) {
                let norm = oc.iter().zip(o).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
                let s = if norm > eps { eps / norm } else { T::one() };
                for (a, &b) in oc.iter_mut().zip(o) {
                    *a = clip01(b + (*a - b) * s);
                }
            }
            Ok(out)
        }
        Norm::NonLp => Err(Error::InvalidConfig("projection needs an l_p norm".into())),
    }
}

fn random_start<T: Element>(x: &Tensor<T>, norm: Norm, eps: T, rng: &mut SeededRng) -> Result<Tensor<T>> {
    let cand = match norm {
        Norm::Linf => {
            let e = eps.to_f64_lossy();
            let mut out = x.clone();
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = *v + T::from_f64_lossy(rng.gen_range(-e..=e)));
            out
        }
        Norm::L2 => {
            let per = x.sample_len();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(per) {
                let dir: Vec<f64> = (0..per).map(|_| StandardNormal.sample(rng)).collect();
                let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
                let r = eps.to_f64_lossy() * rng.gen_range(0.0..1.0f64).powf(1.0 / per as f64);
                for (v, d) in row.iter_mut().zip(dir) {
                    *v = *v + T::from_f64_lossy(r * d / len);
                }
            }
            out
        }
        Norm::NonLp => return Err(Error::InvalidConfig("random start needs an l_p norm".into())),
    };
    project(&cand, x, norm, eps)
}

fn step_direction<T: Element>(grad: &Tensor<T>, norm: Norm) -> Tensor<T> {
    match norm {
        Norm::L2 => {
            let per = grad.sample_len();
            let mut out = grad.clone();
            for row in out.data_mut().chunks_mut(per) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if n > T::zero() {
                    row.iter_mut().for_each(|v| *v = *v / n);
                }
            }
            out
        }
        _ => grad.map(sign),
    }
}

/// Projected gradient ascent on `objective`. Returns every iterate after the
/// start, the last one being the result.
pub fn pgd_iterates<T: Element>(
    pipeline: &Pipeline<'_, T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    objective: Objective,
    rng: &mut SeededRng,
) -> Result<Vec<Tensor<T>>> {
    cfg.validate()?;
    if cfg.norm == Norm::NonLp {
        return Err(Error::InvalidConfig("PGD needs an l_p norm".into()));
    }
    if cfg.eps == 0.0 {
        return Ok(vec![x.clone()]);
    }
    let eps = T::from_f64_lossy(cfg.eps as f64);
    let alpha = T::from_f64_lossy(cfg.step_size() as f64);
    let gcfg = cfg.estimator();
    let mut cur = if cfg.random_start {
        random_start(x, cfg.norm, eps, rng)?
    } else {
        x.clone()
    };
    let mut out = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let est = objective_gradient(pipeline, &cur, y, objective, &gcfg, rng)?;
        let dir = step_direction(&est.grad, cfg.norm);
        let cand = cur.zip_map(&dir, |a, d| a + alpha * d);
        cur = project(&cand, x, cfg.norm, eps)?;
        out.push(cur.clone());
    }
    Ok(out)
}

pub fn pgd<T: Element>(
    pipeline: &Pipeline<'_, T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    let mut it = pgd_iterates(pipeline, x, y, cfg, Objective::CrossEntropy, rng)?;
    Ok(it.pop().expect("at least one iterate"))
}

/// PGD on the CW margin within the l_inf ball.
pub fn cw_margin_attack<T: Element>(
    pipeline: &Pipeline<'_, T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    let cfg = AttackConfig {
        norm: Norm::Linf,
        ..cfg.clone()
    };
    let obj = Objective::NegMargin {
        kappa: cfg.cw_kappa as f64,
    };
    let mut it = pgd_iterates(pipeline, x, y, &cfg, obj, rng)?;
    Ok(it.pop().expect("at least one iterate"))
}

/// Ascent objective of StAdv: `CE - tau * smoothness / N`.
pub fn stadv_objective<T: Element>(
    g: &mut Graph<T>,
    pipeline: &Pipeline<'_, T>,
    x: Var,
    flow: Var,
    y: &[usize],
    tau: T,
    draw: Option<&crate::transforms::TransformDraw>,
    mode: PurifierGrad,
) -> Result<Var> {
    let n = g.value(x).shape()[0];
    let warped = g.warp(x, flow);
    let logits = pipeline.logits(g, warped, draw, mode)?;
    let ce = objective_on(g, logits, y, Objective::CrossEntropy)?;
    let smooth = g.flow_smoothness(flow);
    let pen = g.scale(smooth, -tau / T::from_usize(n).unwrap());
    Ok(g.add(ce, pen))
}

/// Optimizes a flow field by signed ascent on [`stadv_objective`], keeping
/// each component within `eps * side` pixels. Returns the warped images and
/// the flow.
pub fn stadv<T: Element>(
    pipeline: &Pipeline<'_, T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<(Tensor<T>, FlowField<T>)> {
    cfg.validate()?;
    let (n, c, h, w) = x.dims4();
    let mut flow = FlowField::zeros(n, h, w);
    if cfg.eps == 0.0 {
        return Ok((x.clone(), flow));
    }
    let cap_u = T::from_f64_lossy(cfg.eps as f64 * w as f64);
    let cap_v = T::from_f64_lossy(cfg.eps as f64 * h as f64);
    let alpha_frac = cfg.step_size() as f64;
    let (au, av) = (
        T::from_f64_lossy(alpha_frac * w as f64),
        T::from_f64_lossy(alpha_frac * h as f64),
    );
    let tau = T::from_f64_lossy(cfg.stadv_tau as f64);
    let gcfg = cfg.estimator();
    let hw = h * w;
    for _ in 0..cfg.steps {
        let mut grad = Tensor::zeros(flow.0.shape().to_vec());
        for _ in 0..gcfg.eot_k {
            let draw = pipeline.sample_draw([n, c, h, w], rng)?;
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let fv = g.variable(flow.0.clone());
            let obj = stadv_objective(&mut g, pipeline, xv, fv, y, tau, draw.as_ref(), gcfg.mode())?;
            if let Some(d) = g.backward(obj).get(fv) {
                grad.add_assign(d);
            }
        }
        for (fr, gr) in flow.0.data_mut().chunks_mut(2 * hw).zip(grad.data().chunks(2 * hw)) {
            for (i, (f, &d)) in fr.iter_mut().zip(gr).enumerate() {
                let (a, cap) = if i < hw { (au, cap_u) } else { (av, cap_v) };
                *f = (*f + a * sign(d)).max(-cap).min(cap);
            }
        }
        if !flow.is_finite() {
            return Err(Error::NonFinite("StAdv flow".into()));
        }
    }
    let warped = atop_tensor::warp::warp_forward(x, &flow.0).map(clip01);
    Ok((warped, flow))
}

/// Runs one attack config on a batch.
pub fn run_attack<T: Element>(
    pipeline: &Pipeline<'_, T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    match cfg.kind {
        AttackKind::Fgsm => fgsm(pipeline, x, y, T::from_f64_lossy(cfg.eps as f64), &cfg.estimator(), rng),
        AttackKind::Pgd => pgd(pipeline, x, y, cfg, rng),
        AttackKind::Cw => cw_margin_attack(pipeline, x, y, cfg, rng),
        AttackKind::StAdv => Ok(stadv(pipeline, x, y, cfg, rng)?.0),
    }
}

/// Perturbation size of one adversarial example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleNorm {
    pub index: usize,
    pub linf: f32,
    pub l2: f32,
}

/// Adversarial copy of a dataset plus its provenance.
#[derive(Clone, Debug)]
pub struct AdversarialSet {
    pub config: AttackConfig,
    pub seed: u64,
    pub dataset: LabeledDataset,
    pub norms: Vec<ExampleNorm>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    attack: &'a AttackConfig,
    attack_id: String,
    seed: u64,
    count: usize,
    norms: &'a [ExampleNorm],
}

impl AdversarialSet {
    /// Writes the images in the dataset layout plus `attack.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_image_dataset(&self.dataset, dir, RECORDS_PER_SHARD)?;
        let side = Sidecar {
            attack: &self.config,
            attack_id: self.config.id(),
            seed: self.seed,
            count: self.dataset.len(),
            norms: &self.norms,
        };
        let path = dir.join("attack.json");
        fs::write(&path, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&path, e))
    }
}

fn norms_of(x: &Tensor<f32>, adv: &Tensor<f32>) -> Vec<ExampleNorm> {
    let per = x.sample_len();
    x.data()
        .chunks(per)
        .zip(adv.data().chunks(per))
        .enumerate()
        .map(|(index, (a, b))| {
            let (mut linf, mut l2) = (0f32, 0f32);
            for (&p, &q) in a.iter().zip(b) {
                let d = (q - p).abs();
                linf = linf.max(d);
                l2 += d * d;
            }
            ExampleNorm {
                index,
                linf,
                l2: l2.sqrt(),
            }
        })
        .collect()
}

/// Attacks `dataset` with every config, in batches of `batch_size`. Each
/// config draws from its own stream derived from `rng`, so results do not
/// depend on the order of `configs`.
pub fn attack_suite(
    pipeline: &Pipeline<'_, f32>,
    dataset: &LabeledDataset,
    configs: &[AttackConfig],
    batch_size: usize,
    rng: &SeededRng,
) -> Result<BTreeMap<String, AdversarialSet>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let mut out = BTreeMap::new();
    for cfg in configs {
        cfg.validate()?;
        let id = cfg.id();
        let mut stream = rng.derive(&format!("attack/{id}/{}", serde_json::to_string(cfg)?));
        let seed = stream.seed();
        let mut parts = Vec::new();
        for start in (0..dataset.len()).step_by(batch_size) {
            let end = (start + batch_size).min(dataset.len());
            let x = dataset.images().batch_range(start..end);
            let y = &dataset.labels()[start..end];
            parts.push(run_attack(pipeline, &x, y, cfg, &mut stream)?);
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        let adv = Tensor::concat_rows(&refs);
        let norms = norms_of(dataset.images(), &adv);
        let set = AdversarialSet {
            config: cfg.clone(),
            seed,
            dataset: dataset.with_images(adv)?,
            norms,
        };
        out.insert(id, set);
    }
    Ok(out)
}
