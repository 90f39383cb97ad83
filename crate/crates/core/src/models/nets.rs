use atop_tensor::{Element, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::params::{conv_init, linear_init, Cursor, Params};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

const LEAK: f64 = 0.2;

/// Maps `[0, 1]` images to class logits.
pub trait Classifier<T: Element> {
    fn logits(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
    fn num_classes(&self) -> usize;
}

/// Rebuilds an image from a transformed view. `mask` is the keep-mask as a
/// `[N, 1, H, W]` constant, or `None` when the caller has none.
pub trait Purifier<T: Element> {
    fn purify(&self, g: &mut Graph<T>, x_t: Var, mask: Option<Var>) -> Result<Var>;
}

/// One real-valued score per image, `[N]`.
pub trait Critic<T: Element> {
    fn score(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// A net together with its parameters bound on one graph. Gradients with
/// respect to `vars` flow when they were bound as variables.
pub struct Bound<'a, N> {
    pub net: &'a N,
    pub vars: Vec<Var>,
}

fn expect_shape(got: &[usize], c: usize, h: usize, w: usize, what: &str) -> Result<()> {
    if got.len() != 4 || got[1] != c || got[2] != h || got[3] != w {
        return Err(Error::Shape(format!("{what} expects [N, {c}, {h}, {w}], got {got:?}")));
    }
    Ok(())
}

fn check_input<T: Element>(g: &Graph<T>, x: Var, c: usize, h: usize, w: usize, what: &str) -> Result<()> {
    expect_shape(g.value(x).shape(), c, h, w, what)?;
    if !g.value(x).all_finite() {
        return Err(Error::NonFinite(format!("{what} input")));
    }
    Ok(())
}

fn check_finite<T: Element>(g: &Graph<T>, v: Var, what: &str) -> Result<Var> {
    if g.value(v).all_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierArch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Channel widths of the three stages; stages 2 and 3 halve resolution.
    pub widths: [usize; 3],
    /// Per-channel normalization applied inside the forward pass.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ClassifierArch {
    pub fn new(channels: usize, side: usize, classes: usize) -> Self {
        Self {
            channels,
            height: side,
            width: side,
            classes,
            widths: [16, 32, 64],
            mean: vec![0.5; channels],
            std: vec![0.25; channels],
        }
    }

    /// A sub-1k-parameter configuration for gradient checks.
    pub fn toy(channels: usize, side: usize, classes: usize) -> Self {
        Self {
            widths: [2, 3, 4],
            ..Self::new(channels, side, classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.classes < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidConfig("classifier dimensions must be positive".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::InvalidConfig("classifier input must be at least 4x4".into()));
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return Err(Error::InvalidConfig(
                "normalization needs one mean/std per channel".into(),
            ));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// Small residual CNN: stem, three residual stages (two strided), global
/// average pooling and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierNet<T> {
    pub arch: ClassifierArch,
    pub params: Params<T>,
}

impl<T: Element> ClassifierNet<T> {
    pub fn new(arch: ClassifierArch, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let mut p = Params::new();
        conv_init(&mut p, rng, "stem", arch.channels, arch.widths[0], 3, 1.0);
        let mut prev = arch.widths[0];
        for (s, &w) in arch.widths.iter().enumerate() {
            if s > 0 {
                conv_init(&mut p, rng, &format!("down{s}"), prev, w, 3, 1.0);
            }
            conv_init(&mut p, rng, &format!("block{s}.conv1"), w, w, 3, 1.0);
            // residual branches start close to zero
            conv_init(&mut p, rng, &format!("block{s}.conv2"), w, w, 3, 0.1);
            prev = w;
        }
        linear_init(&mut p, rng, "head", prev, arch.classes);
        Ok(Self { arch, params: p })
    }

    pub fn from_params(arch: ClassifierArch, params: Params<T>) -> Result<Self> {
        arch.validate()?;
        let reference = Self::new(arch.clone(), &mut SeededRng::new(0))?;
        check_layout(&reference.params, &params, "classifier")?;
        Ok(Self { arch, params })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound<'_, Self> {
        Bound {
            net: self,
            vars: self.params.bind(g, trainable),
        }
    }

    pub fn cast<U: Element>(&self) -> ClassifierNet<U> {
        ClassifierNet {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let a = &self.arch;
        check_input(g, x, a.channels, a.height, a.width, "classifier")?;
        let scale: Vec<T> = a.std.iter().map(|&s| T::from_f64_lossy(1.0 / s as f64)).collect();
        let shift: Vec<T> = a
            .mean
            .iter()
            .zip(&a.std)
            .map(|(&m, &s)| T::from_f64_lossy(-(m as f64) / s as f64))
            .collect();
        let mut c = Cursor::new(vars);
        let mut h = g.channel_affine(x, &scale, &shift);
        let (w, b) = c.pair();
        h = g.conv2d(h, w, Some(b), 1, 1);
        h = g.relu(h);
        for s in 0..3 {
            if s > 0 {
                let (w, b) = c.pair();
                h = g.conv2d(h, w, Some(b), 2, 1);
                h = g.relu(h);
            }
            let (w1, b1) = c.pair();
            let (w2, b2) = c.pair();
            let r = g.conv2d(h, w1, Some(b1), 1, 1);
            let r = g.relu(r);
            let r = g.conv2d(r, w2, Some(b2), 1, 1);
            let sum = g.add(h, r);
            h = g.relu(sum);
        }
        let pooled = g.global_avg_pool(h);
        let (w, b) = c.pair();
        let logits = g.linear(pooled, w, Some(b));
        check_finite(g, logits, "classifier logits")
    }
}

impl<T: Element> Classifier<T> for ClassifierNet<T> {
    fn logits(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let vars = self.params.bind(g, false);
        self.forward(g, &vars, x)
    }

    fn num_classes(&self) -> usize {
        self.arch.classes
    }
}

impl<T: Element> Classifier<T> for Bound<'_, ClassifierNet<T>> {
    fn logits(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.net.forward(g, &self.vars, x)
    }

    fn num_classes(&self) -> usize {
        self.net.arch.classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PurifierVariant {
    /// Inpainter conditioned on the mask, trained with the GAN-style loss.
    Gan,
    /// Reconstructor of the masked image alone, trained with masked MSE.
    Ae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurifierArch {
    pub variant: PurifierVariant,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Width at full resolution followed by the widths after each of the
    /// four stride-2 downsamplings.
    pub widths: [usize; 5],
}

impl PurifierArch {
    pub fn new(variant: PurifierVariant, channels: usize, side: usize) -> Self {
        Self {
            variant,
            channels,
            height: side,
            width: side,
            widths: [16, 32, 32, 64, 64],
        }
    }

    pub fn toy(variant: PurifierVariant, channels: usize, side: usize) -> Self {
        Self {
            widths: [2; 5],
            ..Self::new(variant, channels, side)
        }
    }

    fn in_channels(&self) -> usize {
        match self.variant {
            PurifierVariant::Gan => self.channels + 1,
            PurifierVariant::Ae => self.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.widths.contains(&0) {
            return Err(Error::InvalidConfig("purifier dimensions must be positive".into()));
        }
        if self.height == 0 || self.height % 16 != 0 || self.width == 0 || self.width % 16 != 0 {
            return Err(Error::InvalidConfig(format!(
                "purifier needs sides divisible by 16, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Encoder-decoder with four stride-2 downsamplings, four upsampling steps
/// with skip connections, and a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct PurifierNet<T> {
    pub arch: PurifierArch,
    pub params: Params<T>,
}

impl<T: Element> PurifierNet<T> {
    pub fn new(arch: PurifierArch, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let w = arch.widths;
        let mut p = Params::new();
        conv_init(&mut p, rng, "enc0", arch.in_channels(), w[0], 3, 1.0);
        for k in 1..5 {
            conv_init(&mut p, rng, &format!("enc{k}"), w[k - 1], w[k], 3, 1.0);
        }
        for k in (1..5).rev() {
            conv_init(&mut p, rng, &format!("dec{k}"), w[k] + w[k - 1], w[k - 1], 3, 1.0);
        }
        conv_init(&mut p, rng, "out", w[0], arch.channels, 3, 0.5);
        Ok(Self { arch, params: p })
    }

    pub fn from_params(arch: PurifierArch, params: Params<T>) -> Result<Self> {
        let reference = Self::new(arch.clone(), &mut SeededRng::new(0))?;
        check_layout(&reference.params, &params, "purifier")?;
        Ok(Self { arch, params })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound<'_, Self> {
        Bound {
            net: self,
            vars: self.params.bind(g, trainable),
        }
    }

    pub fn cast<U: Element>(&self) -> PurifierNet<U> {
        PurifierNet {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    fn forward(&self, g: &mut Graph<T>, vars: &[Var], x_t: Var, mask: Option<Var>) -> Result<Var> {
        let a = &self.arch;
        check_input(g, x_t, a.channels, a.height, a.width, "purifier")?;
        let input = match a.variant {
            PurifierVariant::Gan => {
                let m = mask.ok_or_else(|| Error::InvalidConfig("GAN purifier requires the mask channel".into()))?;
                let n = g.value(x_t).shape()[0];
                if g.value(m).shape() != [n, 1, a.height, a.width] {
                    return Err(Error::Shape(format!(
                        "mask must be [{n}, 1, {}, {}], got {:?}",
                        a.height,
                        a.width,
                        g.value(m).shape()
                    )));
                }
                g.concat_channels(x_t, m)
            }
            PurifierVariant::Ae => x_t,
        };
        let leak = T::from_f64_lossy(LEAK);
        let mut c = Cursor::new(vars);
        let mut skips = Vec::with_capacity(5);
        let (w, b) = c.pair();
        let h = g.conv2d(input, w, Some(b), 1, 1);
        let mut h = g.leaky_relu(h, leak);
        skips.push(h);
        for _ in 1..5 {
            let (w, b) = c.pair();
            let d = g.conv2d(h, w, Some(b), 2, 1);
            h = g.leaky_relu(d, leak);
            skips.push(h);
        }
        for k in (1..5).rev() {
            let up = g.upsample2(h);
            let cat = g.concat_channels(up, skips[k - 1]);
            let (w, b) = c.pair();
            let d = g.conv2d(cat, w, Some(b), 1, 1);
            h = g.leaky_relu(d, leak);
        }
        let (w, b) = c.pair();
        let out = g.conv2d(h, w, Some(b), 1, 1);
        let out = g.sigmoid(out);
        check_finite(g, out, "purifier output")
    }
}

impl<T: Element> Purifier<T> for PurifierNet<T> {
    fn purify(&self, g: &mut Graph<T>, x_t: Var, mask: Option<Var>) -> Result<Var> {
        let vars = self.params.bind(g, false);
        self.forward(g, &vars, x_t, mask)
    }
}

impl<T: Element> Purifier<T> for Bound<'_, PurifierNet<T>> {
    fn purify(&self, g: &mut Graph<T>, x_t: Var, mask: Option<Var>) -> Result<Var> {
        self.net.forward(g, &self.vars, x_t, mask)
    }
}

/// Returns its input unchanged; the undefended baseline.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityPurifier;

impl<T: Element> Purifier<T> for IdentityPurifier {
    fn purify(&self, _g: &mut Graph<T>, x_t: Var, _mask: Option<Var>) -> Result<Var> {
        Ok(x_t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorArch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Widths of the three hidden convolutions; a fourth maps to one channel.
    pub widths: [usize; 3],
}

impl DiscriminatorArch {
    pub fn new(channels: usize, side: usize) -> Self {
        Self {
            channels,
            height: side,
            width: side,
            widths: [16, 32, 64],
        }
    }

    pub fn toy(channels: usize, side: usize) -> Self {
        Self {
            widths: [2, 2, 2],
            ..Self::new(channels, side)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.widths.contains(&0) || self.height < 8 || self.width < 8 {
            return Err(Error::InvalidConfig(
                "discriminator needs positive widths and sides >= 8".into(),
            ));
        }
        Ok(())
    }
}

/// Four convolutions (three strided) and global average pooling to one
/// score per image.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet<T> {
    pub arch: DiscriminatorArch,
    pub params: Params<T>,
}

impl<T: Element> DiscriminatorNet<T> {
    pub fn new(arch: DiscriminatorArch, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let [w0, w1, w2] = arch.widths;
        let mut p = Params::new();
        conv_init(&mut p, rng, "conv0", arch.channels, w0, 3, 1.0);
        conv_init(&mut p, rng, "conv1", w0, w1, 3, 1.0);
        conv_init(&mut p, rng, "conv2", w1, w2, 3, 1.0);
        conv_init(&mut p, rng, "conv3", w2, 1, 3, 1.0);
        Ok(Self { arch, params: p })
    }

    /// All weights and biases zero, so every image scores 0.
    pub fn zeroed(arch: DiscriminatorArch) -> Result<Self> {
        let mut d = Self::new(arch, &mut SeededRng::new(0))?;
        for t in d.params.tensors_mut() {
            t.data_mut().fill(T::zero());
        }
        Ok(d)
    }

    pub fn from_params(arch: DiscriminatorArch, params: Params<T>) -> Result<Self> {
        let reference = Self::new(arch.clone(), &mut SeededRng::new(0))?;
        check_layout(&reference.params, &params, "discriminator")?;
        Ok(Self { arch, params })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound<'_, Self> {
        Bound {
            net: self,
            vars: self.params.bind(g, trainable),
        }
    }

    pub fn cast<U: Element>(&self) -> DiscriminatorNet<U> {
        DiscriminatorNet {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Clamps every parameter into `[-c, c]`.
    pub fn clip_weights(&mut self, c: T) {
        for t in self.params.tensors_mut() {
            for v in t.data_mut() {
                *v = v.max(-c).min(c);
            }
        }
    }

    fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let a = &self.arch;
        check_input(g, x, a.channels, a.height, a.width, "discriminator")?;
        let leak = T::from_f64_lossy(LEAK);
        let mut c = Cursor::new(vars);
        let mut h = x;
        for (i, stride) in [2, 2, 2, 1].into_iter().enumerate() {
            let (w, b) = c.pair();
            h = g.conv2d(h, w, Some(b), stride, 1);
            if i < 3 {
                h = g.leaky_relu(h, leak);
            }
        }
        let pooled = g.global_avg_pool(h);
        let n = g.value(x).shape()[0];
        let score = g.reshape(pooled, &[n]);
        check_finite(g, score, "discriminator score")
    }
}

impl<T: Element> Critic<T> for DiscriminatorNet<T> {
    fn score(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let vars = self.params.bind(g, false);
        self.forward(g, &vars, x)
    }
}

impl<T: Element> Critic<T> for Bound<'_, DiscriminatorNet<T>> {
    fn score(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.net.forward(g, &self.vars, x)
    }
}

fn check_layout<T: Element>(reference: &Params<T>, got: &Params<T>, what: &str) -> Result<()> {
    if reference.names() != got.names() {
        return Err(Error::ArchMismatch(format!("{what} parameter names differ")));
    }
    for ((name, a), b) in reference.names().iter().zip(reference.tensors()).zip(got.tensors()) {
        if a.shape() != b.shape() {
            return Err(Error::ArchMismatch(format!(
                "{what} parameter {name}: expected {:?}, found {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Runs `f` once on a graph of constants and returns the output values.
pub fn eval_classifier<T: Element>(f: &dyn Classifier<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = f.logits(&mut g, xv)?;
    Ok(g.value(out).clone())
}
