use atop_tensor::{Element, Graph, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::rng::SeededRng;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Default for Params<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Element> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every tensor on `g`, tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn cast<U: Element>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// SHA-256 over the shapes and the exact bits of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// He-normal conv weight `[out, in, k, k]` times `gain`, zero bias.
pub(crate) fn conv_init<T: Element>(
    p: &mut Params<T>,
    rng: &mut SeededRng,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    gain: f64,
) {
    let std = gain * (2.0 / (c_in * k * k) as f64).sqrt();
    p.push(format!("{name}.weight"), normal(rng, vec![c_out, c_in, k, k], std));
    p.push(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
}

pub(crate) fn linear_init<T: Element>(p: &mut Params<T>, rng: &mut SeededRng, name: &str, d_in: usize, d_out: usize) {
    let std = (1.0 / d_in as f64).sqrt();
    p.push(format!("{name}.weight"), normal(rng, vec![d_out, d_in], std));
    p.push(format!("{name}.bias"), Tensor::zeros(vec![d_out]));
}

fn normal<T: Element>(rng: &mut SeededRng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(std * z)
    })
}

/// Walks bound parameter vars in creation order.
pub(crate) struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub(crate) fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    /// `(weight, bias)`
    pub(crate) fn pair(&mut self) -> (Var, Var) {
        (self.next(), self.next())
    }
}
