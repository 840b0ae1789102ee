//! Parameterized building blocks shared by the encoder and decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Matrix, Real};

/// Deterministic parameter initializer.
pub struct Initializer<'a, F: Real> {
    pub store: &'a mut ParamStore<F>,
    pub rng: ChaCha8Rng,
}

impl<F: Real> Initializer<'_, F> {
    /// Xavier-uniform weight matrix.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let rng = &mut self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| F::from_f64(rng.random_range(-bound..bound)));
        self.store.add(name, m)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| F::from_f64(dist.sample(rng)));
        self.store.add(name, m)
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, lo: f64, hi: f64) -> ParamId {
        let rng = &mut self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| F::from_f64(rng.random_range(lo..hi)));
        self.store.add(name, m)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Matrix::filled(rows, cols, F::from_f64(value)))
    }
}

/// Affine map `x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real>(init: &mut Initializer<F>, name: &str, input: usize, output: usize) -> Self {
        let weight = init.xavier(&format!("{name}.weight"), input, output);
        let bias = Some(init.constant(&format!("{name}.bias"), 1, output, 0.0));
        Self { weight, bias }
    }

    pub fn no_bias<F: Real>(init: &mut Initializer<F>, name: &str, input: usize, output: usize) -> Self {
        let weight = init.xavier(&format!("{name}.weight"), input, output);
        Self { weight, bias: None }
    }

    /// Zero-initialized weights and bias.
    pub fn zeroed<F: Real>(init: &mut Initializer<F>, name: &str, input: usize, output: usize) -> Self {
        let weight = init.constant(&format!("{name}.weight"), input, output, 0.0);
        let bias = Some(init.constant(&format!("{name}.bias"), 1, output, 0.0));
        Self { weight, bias }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(init: &mut Initializer<F>, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.gamma"), 1, dim, 1.0),
            beta: init.constant(&format!("{name}.beta"), 1, dim, 0.0),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; the last layer is zero-initialized when
    /// `zero_last` is set.
    pub fn new<F: Real>(init: &mut Initializer<F>, name: &str, dims: &[usize], zero_last: bool) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let name = format!("{name}.{i}");
                if zero_last && i + 1 == n {
                    Linear::zeroed(init, &name, dims[i], dims[i + 1])
                } else {
                    Linear::new(init, &name, dims[i], dims[i + 1])
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, mut x: Var) -> Var {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        x
    }
}

/// Multi-head attention with separate query, key, value and output maps.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(init: &mut Initializer<F>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(init, &format!("{name}.query"), dim, dim),
            key: Linear::new(init, &format!("{name}.key"), dim, dim),
            value: Linear::new(init, &format!("{name}.value"), dim, dim),
            output: Linear::new(init, &format!("{name}.output"), dim, dim),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        query: Var,
        key: Var,
        value: Var,
        key_mask: Option<&[bool]>,
    ) -> (Var, Var) {
        let q = self.query.forward(g, query);
        let k = self.key.forward(g, key);
        let v = self.value.forward(g, value);
        let att = g.attention(&[(q, k)], v, self.heads, key_mask);
        (self.output.forward(g, att), att)
    }
}

/// Position-wise feed-forward block `Linear → ReLU → dropout → Linear`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

impl FeedForward {
    pub fn new<F: Real>(init: &mut Initializer<F>, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            expand: Linear::new(init, &format!("{name}.expand"), dim, hidden),
            contract: Linear::new(init, &format!("{name}.contract"), hidden, dim),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let h = self.expand.forward(g, x);
        let h = g.relu(h);
        let h = g.dropout(h);
        self.contract.forward(g, h)
    }
}

/// `LN(x + dropout(update))`.
pub fn residual_norm<F: Real>(g: &mut Graph<F>, norm: &LayerNorm, x: Var, update: Var) -> Var {
    let update = g.dropout(update);
    let sum = g.add(x, update);
    norm.forward(g, sum)
}

/// Fixed sinusoidal table for integer or normalized positions.
pub fn position_table<F: Real>(positions: impl Iterator<Item = f64>, dim: usize, temperature: f64) -> Matrix<F> {
    let rows: Vec<Vec<F>> = positions
        .map(|x| {
            crate::geometry::sinusoidal_encode(x, dim, temperature)
                .expect("even model dimension")
                .into_iter()
                .map(F::from_f64)
                .collect()
        })
        .collect();
    Matrix::from_rows(&rows)
}
