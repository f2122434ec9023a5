//! Minimal neural runtime: dense layers with hand-derived gradients, the
//! multi-resolution hash encoder, the fixed point-set extractor, and a flat
//! parameter format.

pub mod agnostic;
pub mod hashgrid;
pub mod serialize;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use agnostic::AgnosticExtractor;
pub use hashgrid::{HashGridConfig, HashGridEncoder, HashGridGrad};
pub use serialize::{load_into, read_blob, write_blob, BlobManifest};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("layer {layer} takes {input} inputs but the previous layer emits {prev}")]
    Chain { layer: usize, input: usize, prev: usize },
    #[error("non-finite parameter in {0}")]
    NonFinite(String),
    #[error("location {0:?} outside the unit cube")]
    OutOfRange([f64; 3]),
    #[error("empty input")]
    Empty,
    #[error("parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    None,
    Softplus,
    /// `2^clamp(u, -4, 4)`
    ExpClamped,
}

pub const EXP_CLAMP: f64 = 4.0;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::None => x,
            Activation::Softplus => softplus(x),
            Activation::ExpClamped => libm::exp2(x.clamp(-EXP_CLAMP, EXP_CLAMP)),
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::None => 1.0,
            Activation::Softplus => sigmoid(x),
            Activation::ExpClamped => {
                if x > -EXP_CLAMP && x < EXP_CLAMP {
                    y * std::f64::consts::LN_2
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Something holding named learnable tensors in a fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Name of the first tensor holding a non-finite value.
    fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.visit(&mut |name, t| {
            if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        bad
    }
}

/// One fully connected layer; `weight` is `out x in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub act: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize, act: Activation) -> Self {
        Dense { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim], act }
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn random<R: Rng>(in_dim: usize, out_dim: usize, act: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut d = Dense::zeros(in_dim, out_dim, act);
        d.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        d.bias.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
        d
    }

    #[inline]
    fn pre_activation(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in self.weight.chunks_exact(self.in_dim.max(1)).enumerate().take(self.out_dim) {
            out[o] = self.bias[o] + dot(row, x);
        }
        if self.in_dim == 0 {
            out.copy_from_slice(&self.bias);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations cached by a forward pass, consumed by `backward`.
#[derive(Debug, Clone, Default)]
pub struct MlpTape {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(|v| v.as_slice()).unwrap_or(&self.input)
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self, NnError> {
        for i in 1..layers.len() {
            if layers[i].in_dim != layers[i - 1].out_dim {
                return Err(NnError::Chain { layer: i, input: layers[i].in_dim, prev: layers[i - 1].out_dim });
            }
        }
        Ok(Mlp { layers })
    }

    /// Random layers of the given widths; hidden layers use ReLU and the last
    /// layer `last_act`.
    pub fn random<R: Rng>(widths: &[usize], last_act: Activation, rng: &mut R) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last_act } else { Activation::Relu };
                Dense::random(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    /// Same shapes, all parameters zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Mlp { layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim, l.act)).collect() }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim()];
        w.extend(self.layers.iter().map(|l| l.out_dim));
        w
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_tape(x)?.post.pop().unwrap_or_else(|| x.to_vec()))
    }

    pub fn forward_tape(&self, x: &[f64]) -> Result<MlpTape, NnError> {
        if x.len() != self.in_dim() {
            return Err(NnError::Dim { expected: self.in_dim(), got: x.len() });
        }
        let mut tape = MlpTape {
            input: x.to_vec(),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let prev = tape.post.last().unwrap_or(&tape.input);
            let mut pre = vec![0.0; layer.out_dim];
            layer.pre_activation(prev, &mut pre);
            let post = pre.iter().map(|&v| layer.act.apply(v)).collect();
            tape.pre.push(pre);
            tape.post.push(post);
        }
        Ok(tape)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, tape: &MlpTape, upstream: &[f64], grads: &mut Mlp) -> Result<Vec<f64>, NnError> {
        if upstream.len() != self.out_dim() {
            return Err(NnError::Dim { expected: self.out_dim(), got: upstream.len() });
        }
        if tape.post.len() != self.layers.len() {
            return Err(NnError::Dim { expected: self.layers.len(), got: tape.post.len() });
        }
        let mut g = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            for o in 0..layer.out_dim {
                g[o] *= layer.act.derivative(tape.pre[l][o], tape.post[l][o]);
            }
            let gl = &mut grads.layers[l];
            let mut gin = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                gl.bias[o] += go;
                let row = o * layer.in_dim;
                let wrow = &layer.weight[row..row + layer.in_dim];
                let grow = &mut gl.weight[row..row + layer.in_dim];
                for i in 0..layer.in_dim {
                    grow[i] += go * input[i];
                    gin[i] += go * wrow[i];
                }
            }
            g = gin;
        }
        Ok(g)
    }

    pub fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("{prefix}.{i}.weight"), &l.weight);
            f(&format!("{prefix}.{i}.bias"), &l.bias);
        }
    }

    pub fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("{prefix}.{i}.weight"), &mut l.weight);
            f(&format!("{prefix}.{i}.bias"), &mut l.bias);
        }
    }

    /// Zeroes the last layer so the net emits `act(0)` for every input.
    pub fn zero_last_layer(&mut self) {
        if let Some(l) = self.layers.last_mut() {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }
}

impl Params for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.visit_named("mlp", f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.visit_named_mut("mlp", f)
    }
}
