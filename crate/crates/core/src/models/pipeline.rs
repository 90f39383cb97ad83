use atop_tensor::{Element, Graph, Tensor, Var};

use super::nets::{Classifier, Purifier};
use crate::error::Result;
use crate::rng::SeededRng;
use crate::transforms::{TransformConfig, TransformDraw, TransformKind};

/// How the purifier is differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PurifierGrad {
    #[default]
    Exact,
    /// Forward uses the purifier; backward treats it as the identity.
    Bpda,
}

/// Transform, purifier and classifier composed: `y = f(g(t(x)))`.
pub struct Pipeline<'a, T: Element> {
    /// `None` disables the random transform.
    pub transform: Option<TransformConfig>,
    pub purifier: &'a dyn Purifier<T>,
    pub classifier: &'a dyn Classifier<T>,
}

impl<T: Element> Clone for Pipeline<'_, T> {
    fn clone(&self) -> Self {
        Self {
            transform: self.transform.clone(),
            purifier: self.purifier,
            classifier: self.classifier,
        }
    }
}

impl<'a, T: Element> Pipeline<'a, T> {
    pub fn new(
        transform: Option<TransformConfig>,
        purifier: &'a dyn Purifier<T>,
        classifier: &'a dyn Classifier<T>,
    ) -> Self {
        Self {
            transform,
            purifier,
            classifier,
        }
    }

    /// True when two calls on the same input can differ.
    pub fn is_stochastic(&self) -> bool {
        self.transform.is_some()
    }

    /// Fresh transform randomness for a batch of the given shape.
    pub fn sample_draw(&self, shape: [usize; 4], rng: &mut SeededRng) -> Result<Option<TransformDraw>> {
        self.transform
            .as_ref()
            .map(|cfg| TransformDraw::sample(cfg, shape, rng))
            .transpose()
    }

    /// `x_hat` on `g` for a given draw (`None` only when the transform is
    /// disabled).
    pub fn purify(&self, g: &mut Graph<T>, x: Var, draw: Option<&TransformDraw>, mode: PurifierGrad) -> Result<Var> {
        purify_on_graph(g, x, draw, self.purifier, mode)
    }

    /// Logits of the full pipeline for a given draw.
    pub fn logits(&self, g: &mut Graph<T>, x: Var, draw: Option<&TransformDraw>, mode: PurifierGrad) -> Result<Var> {
        let x_hat = self.purify(g, x, draw, mode)?;
        self.classifier.logits(g, x_hat)
    }

    /// One stochastic forward pass on concrete images; returns logits.
    pub fn predict_logits(&self, x: &Tensor<T>, rng: &mut SeededRng) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        let draw = self.sample_draw([n, c, h, w], rng)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.logits(&mut g, xv, draw.as_ref(), PurifierGrad::Exact)?;
        Ok(g.value(out).clone())
    }

    /// One stochastic forward pass; returns argmax classes.
    pub fn predict(&self, x: &Tensor<T>, rng: &mut SeededRng) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_logits(x, rng)?))
    }
}

/// Builds `x_hat` for `x` on `g`. Without a draw the purifier sees `x` and an
/// all-ones mask.
pub fn purify_on_graph<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    draw: Option<&TransformDraw>,
    purifier: &dyn Purifier<T>,
    mode: PurifierGrad,
) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4();
    let Some(draw) = draw else {
        let ones = g.constant(Tensor::ones(vec![n, 1, h, w]));
        return purify_view(purifier, g, x, ones, mode);
    };
    let noisy = match &draw.noise {
        Some(eta) => {
            let shifted = g.add_const(x, &eta.cast());
            g.clamp(shifted, T::zero(), T::one())
        }
        None => x,
    };
    let views: Vec<(Var, Tensor<T>)> = (0..draw.num_views())
        .map(|v| {
            let keep = draw.mask_tensor::<T>(v, c);
            (g.mul_const(noisy, keep.clone()), keep)
        })
        .collect();
    match draw.kind {
        TransformKind::Rt1 | TransformKind::Rt2 => {
            let mask = g.constant(draw.mask_tensor(0, 1));
            purify_view(purifier, g, views[0].0, mask, mode)
        }
        TransformKind::Rt3 => {
            let mut acc: Option<Var> = None;
            for (v, (x_t, keep)) in views.iter().enumerate() {
                let mask = g.constant(draw.mask_tensor(v, 1));
                let input = match mode {
                    PurifierGrad::Exact => *x_t,
                    PurifierGrad::Bpda => g.constant(g.value(*x_t).clone()),
                };
                let xg = purifier.purify(g, input, Some(mask))?;
                let part = g.mul_const(xg, keep.map(|k| T::one() - k));
                acc = Some(match acc {
                    Some(a) => g.add(a, part),
                    None => part,
                });
            }
            let fwd = acc.expect("at least one view");
            Ok(match mode {
                PurifierGrad::Exact => fwd,
                // every pixel of x_hat is a purified copy of the shared
                // noisy pixel, so the identity surrogate attaches there
                PurifierGrad::Bpda => g.straight_through(fwd, noisy),
            })
        }
    }
}

fn purify_view<T: Element>(
    purifier: &dyn Purifier<T>,
    g: &mut Graph<T>,
    x_t: Var,
    mask: Var,
    mode: PurifierGrad,
) -> Result<Var> {
    match mode {
        PurifierGrad::Exact => purifier.purify(g, x_t, Some(mask)),
        PurifierGrad::Bpda => {
            let detached = g.constant(g.value(x_t).clone());
            let fwd = purifier.purify(g, detached, Some(mask))?;
            Ok(g.straight_through(fwd, x_t))
        }
    }
}

/// `x_hat = g(t(x))` on concrete images with fresh transform randomness.
pub fn purify_pipeline<T: Element>(
    x: &Tensor<T>,
    t_cfg: Option<&TransformConfig>,
    purifier: &dyn Purifier<T>,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4();
    let draw = t_cfg
        .map(|cfg| TransformDraw::sample(cfg, [n, c, h, w], rng))
        .transpose()?;
    purify_with_draw(x, draw.as_ref(), purifier)
}

/// `x_hat` on concrete images for a fixed draw.
pub fn purify_with_draw<T: Element>(
    x: &Tensor<T>,
    draw: Option<&TransformDraw>,
    purifier: &dyn Purifier<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = purify_on_graph(&mut g, xv, draw, purifier, PurifierGrad::Exact)?;
    Ok(g.value(out).clone())
}

pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, T::neg_infinity()),
                    |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    },
                )
                .0
        })
        .collect()
}
