//! A small reverse-mode automatic differentiation tape over dense matrices.
//!
//! Every operation appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into the bound
//! parameters. One graph is built per sample and forward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Matrix, Real};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Affine(Var, F),
    Div(Var, Var),
    Sinusoid {
        x: Var,
        freqs: Vec<F>,
    },
    MulRows {
        x: Var,
        s: Var,
    },
    MulConst {
        x: Var,
        k: Matrix<F>,
    },
    Relu(Var),
    Sigmoid(Var),
    Logit {
        x: Var,
        eps: F,
    },
    Ln(Var),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Clamp {
        x: Var,
        lo: F,
        hi: F,
    },
    SoftmaxRows(Var),
    NormalizeCols {
        x: Var,
        row_mask: Option<Vec<bool>>,
        sums: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<F>,
        inv_std: Vec<F>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Attention {
        parts: Vec<(Var, Var)>,
        v: Var,
        heads: usize,
        scale: F,
        probs: Vec<Matrix<F>>,
    },
}

struct Node<F> {
    value: Matrix<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Computation tape bound to a parameter store.
pub struct Graph<'p, F: Real> {
    params: &'p ParamStore<F>,
    bound: Vec<Option<Var>>,
    nodes: Vec<Node<F>>,
    dropout: Option<(ChaCha8Rng, f64)>,
}

// Strided read-only view used to address head slices without copying.
#[derive(Clone, Copy)]
struct View<'a, F> {
    data: &'a [F],
    off: usize,
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, F: Real> View<'a, F> {
    fn of(m: &'a Matrix<F>) -> Self {
        Self {
            data: m.data(),
            off: 0,
            rows: m.rows(),
            cols: m.cols(),
            rs: m.cols() as isize,
            cs: 1,
        }
    }

    fn cols(self, start: usize, len: usize) -> Self {
        debug_assert!(start + len <= self.cols);
        Self {
            off: self.off + (start as isize * self.cs) as usize,
            cols: len,
            ..self
        }
    }

    fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

/// `out[:, col_off..col_off+n] ← α·a·b + β·out[...]` for a row-major `out`.
fn gemm_view<F: Real>(alpha: F, a: View<F>, b: View<F>, beta: F, out: &mut Matrix<F>, col_off: usize) {
    assert_eq!(a.cols, b.rows, "inner dimension mismatch");
    assert_eq!(a.rows, out.rows(), "row mismatch");
    assert!(col_off + b.cols <= out.cols(), "column slice out of range");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    let rsc = out.cols() as isize;
    // SAFETY: views are derived from live matrices with in-range offsets and
    // strides; the output slice is checked above.
    unsafe {
        F::gemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.off),
            b.rs,
            b.cs,
            beta,
            out.data_mut().as_mut_ptr().add(col_off),
            rsc,
            1,
        );
    }
}

fn zip_map<F: Real>(a: &Matrix<F>, b: &Matrix<F>, f: impl Fn(F, F) -> F) -> Matrix<F> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn softmax_rows_in_place<F: Real>(m: &mut Matrix<F>, col_mask: Option<&[bool]>) {
    let cols = m.cols();
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let valid = |c: usize| col_mask.is_none_or(|mask| mask[c]);
        let mut max = None::<F>;
        for (c, &v) in row.iter().enumerate() {
            if valid(c) {
                max = Some(max.map_or(v, |m: F| m.max(v)));
            }
        }
        let max = max.expect("softmax row with no valid column");
        let mut total = F::ZERO;
        for (c, v) in row.iter_mut().enumerate().take(cols) {
            if valid(c) {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = F::ZERO;
            }
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            bound: vec![None; params.len()],
            nodes: Vec::new(),
            dropout: None,
        }
    }

    /// Enables dropout with probability `p`, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng, p: f64) -> Self {
        if p > 0.0 {
            self.dropout = Some((rng, p));
        }
        self
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<F> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => &node.value,
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.get(0, 0)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Matrix<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter to the tape, once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Matrix::default(),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Returns a gradient-free copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        let va = if ta { View::of(am).t() } else { View::of(am) };
        let vb = if tb { View::of(bm).t() } else { View::of(bm) };
        let mut out = Matrix::zeros(va.rows, vb.cols);
        gemm_view(F::ONE, va, vb, F::ZERO, &mut out, 0);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true, false)
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xm, bm) = (self.value(x), self.value(bias));
        assert_eq!(bm.shape(), (1, xm.cols()), "bias shape");
        let mut out = xm.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bm.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k), &[x])
    }

    /// `a·x + b` elementwise.
    pub fn affine(&mut self, x: Var, a: F, b: F) -> Var {
        let out = self.value(x).map(|v| a * v + b);
        self.push(out, Op::Affine(x, a), &[x])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b), &[a, b])
    }

    /// Sinusoidal encoding of a column vector: row `r` becomes pairs
    /// `(sin(x·τ/ω_i), cos(x·τ/ω_i))` with `ω_i = 10000^(2i/dim)`.
    pub fn sinusoid(&mut self, x: Var, dim: usize, temperature: f64) -> Var {
        assert!(dim > 0 && dim.is_multiple_of(2), "sinusoid dimension must be even");
        let xm = self.value(x);
        assert_eq!(xm.cols(), 1, "sinusoid expects a column vector");
        let freqs: Vec<F> = (0..dim / 2)
            .map(|i| F::from_f64(temperature / 10000f64.powf(2.0 * i as f64 / dim as f64)))
            .collect();
        let out = Matrix::from_fn(xm.rows(), dim, |r, c| {
            let arg = (xm.get(r, 0).to_f64()) * freqs[c / 2].to_f64();
            F::from_f64(if c % 2 == 0 { arg.sin() } else { arg.cos() })
        });
        self.push(out, Op::Sinusoid { x, freqs }, &[x])
    }

    /// Scales row `i` of `x` by `s[i]`, where `s` is a column vector.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Var {
        let (xm, sm) = (self.value(x), self.value(s));
        assert_eq!(sm.shape(), (xm.rows(), 1), "row scale shape");
        let mut out = xm.clone();
        for r in 0..out.rows() {
            let k = sm.get(r, 0);
            for v in out.row_mut(r) {
                *v *= k;
            }
        }
        self.push(out, Op::MulRows { x, s }, &[x, s])
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, k: Matrix<F>) -> Var {
        let out = zip_map(self.value(x), &k, |a, b| a * b);
        self.push(out, Op::MulConst { x, k }, &[x])
    }

    /// Inverted dropout; identity when dropout is disabled.
    pub fn dropout(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).shape();
        let Some((rng, p)) = self.dropout.as_mut() else {
            return x;
        };
        let p = *p;
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < p { F::ZERO } else { keep });
        self.mul_const(x, mask)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::ZERO));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(F::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Inverse sigmoid with the input clamped to `[eps, 1 − eps]`.
    pub fn logit(&mut self, x: Var, eps: F) -> Var {
        let out = self.value(x).map(|p| {
            let p = p.max(eps).min(F::ONE - eps);
            (p / (F::ONE - p)).ln()
        });
        self.push(out, Op::Logit { x, eps }, &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(F::ln);
        self.push(out, Op::Ln(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(F::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), F::max);
        self.push(out, Op::Maximum(a, b), &[a, b])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), F::min);
        self.push(out, Op::Minimum(a, b), &[a, b])
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Row-wise softmax. Columns with `col_mask[c] == false` get exactly zero.
    pub fn softmax_rows(&mut self, x: Var, col_mask: Option<&[bool]>) -> Var {
        let mut out = self.value(x).clone();
        softmax_rows_in_place(&mut out, col_mask);
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Divides each column by its sum over valid rows plus `eps`; invalid rows
    /// become zero.
    pub fn normalize_cols(&mut self, x: Var, row_mask: Option<&[bool]>, eps: F) -> Var {
        let xm = self.value(x);
        let valid = |r: usize| row_mask.is_none_or(|m| m[r]);
        let mut sums = vec![eps; xm.cols()];
        for r in (0..xm.rows()).filter(|&r| valid(r)) {
            for (s, &v) in sums.iter_mut().zip(xm.row(r)) {
                *s += v;
            }
        }
        let out = Matrix::from_fn(xm.rows(), xm.cols(), |r, c| {
            if valid(r) {
                xm.get(r, c) / sums[c]
            } else {
                F::ZERO
            }
        });
        let op = Op::NormalizeCols {
            x,
            row_mask: row_mask.map(<[bool]>::to_vec),
            sums,
        };
        self.push(out, op, &[x])
    }

    /// Layer normalization over each row with affine `gamma`, `beta` (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = F::from_f64(1e-5);
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let n = F::from_f64(cols as f64);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::ONE / (var + eps).sqrt();
            inv_std.push(is);
            for (h, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, cols), "gamma shape");
        let out = Matrix::from_fn(rows, cols, |r, c| xhat.get(r, c) * g.get(0, c) + b.get(0, c));
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xm = self.value(x);
        let idx: Vec<usize> = (start..start + len).collect();
        let out = xm.select_rows(&idx);
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xm = self.value(x);
        let out = Matrix::from_fn(xm.rows(), len, |r, c| xm.get(r, start + c));
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    /// Column-wise maximum over the valid rows, as a `1 × n` row.
    pub fn max_pool_rows(&mut self, x: Var, row_mask: Option<&[bool]>) -> Var {
        let xm = self.value(x);
        let mut argmax = vec![usize::MAX; xm.cols()];
        let mut best = vec![F::ZERO; xm.cols()];
        for r in 0..xm.rows() {
            if !row_mask.is_none_or(|m| m[r]) {
                continue;
            }
            for (c, &v) in xm.row(r).iter().enumerate() {
                if argmax[c] == usize::MAX || v > best[c] {
                    argmax[c] = r;
                    best[c] = v;
                }
            }
        }
        assert!(argmax.iter().all(|&a| a != usize::MAX), "max pool over no valid rows");
        let out = Matrix::from_vec(1, best.len(), best);
        self.push(out, Op::MaxPoolRows { x, argmax }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(x), &[x])
    }

    /// Sum of several `1 × 1` scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).select_rows(idx);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `parts` holds `(query, key)` pairs whose per-head dot products are
    /// summed into one score, so queries and keys may be concatenations of
    /// separately projected features. Every part width must divide by
    /// `heads`; the scale is `1/√(Σ head widths)`. Keys with
    /// `key_mask[j] == false` receive exactly zero weight.
    pub fn attention(&mut self, parts: &[(Var, Var)], v: Var, heads: usize, key_mask: Option<&[bool]>) -> Var {
        let n = self.value(parts[0].0).rows();
        let m = self.value(v).rows();
        let dv = self.value(v).cols();
        assert!(
            dv.is_multiple_of(heads),
            "value width {dv} not divisible by {heads} heads"
        );
        let mut head_width = 0;
        for &(q, k) in parts {
            let (qm, km) = (self.value(q), self.value(k));
            assert_eq!(qm.rows(), n, "query rows");
            assert_eq!(km.rows(), m, "key rows");
            assert_eq!(qm.cols(), km.cols(), "query/key width");
            assert!(qm.cols() % heads == 0, "query width not divisible by heads");
            head_width += qm.cols() / heads;
        }
        let scale = F::ONE / F::from_f64(head_width as f64).sqrt();
        let dvh = dv / heads;
        let mut out = Matrix::zeros(n, dv);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut scores = Matrix::zeros(n, m);
            for &(q, k) in parts {
                let (qm, km) = (self.value(q), self.value(k));
                let dh = qm.cols() / heads;
                let qv = View::of(qm).cols(h * dh, dh);
                let kv = View::of(km).cols(h * dh, dh).t();
                gemm_view(scale, qv, kv, F::ONE, &mut scores, 0);
            }
            softmax_rows_in_place(&mut scores, key_mask);
            let vv = View::of(self.value(v)).cols(h * dvh, dvh);
            gemm_view(F::ONE, View::of(&scores), vv, F::ZERO, &mut out, h * dvh);
            probs.push(scores);
        }
        let mut inputs: Vec<Var> = parts.iter().flat_map(|&(q, k)| [q, k]).collect();
        inputs.push(v);
        let op = Op::Attention {
            parts: parts.to_vec(),
            v,
            heads,
            scale,
            probs,
        };
        self.push(out, op, &inputs)
    }

    /// Per-head attention probabilities of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Matrix<F>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::filled(1, 1, F::ONE));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(_) = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = Gradients::empty(self.params.len());
        for (p, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                if let Some(g) = grads[v.0].take() {
                    out.set(ParamId(p), g);
                }
            }
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<F>, g: &Matrix<F>, grads: &mut [Option<Matrix<F>>]) {
        let mut acc = |v: Var, delta: Matrix<F>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.value(v);
        let y = &node.value;

        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                // C = op(A)·op(B)
                if self.wants(a) {
                    let bm = val(b);
                    let vb = if tb { View::of(bm).t() } else { View::of(bm) };
                    let d = if ta {
                        // A = (op(A))ᵀ → dA = op(B)·Gᵀ
                        let mut d = Matrix::zeros(val(a).rows(), val(a).cols());
                        gemm_view(F::ONE, vb, View::of(g).t(), F::ZERO, &mut d, 0);
                        d
                    } else {
                        let mut d = Matrix::zeros(val(a).rows(), val(a).cols());
                        gemm_view(F::ONE, View::of(g), vb.t(), F::ZERO, &mut d, 0);
                        d
                    };
                    acc(a, d);
                }
                if self.wants(b) {
                    let am = val(a);
                    let va = if ta { View::of(am).t() } else { View::of(am) };
                    let mut d = Matrix::zeros(val(b).rows(), val(b).cols());
                    if tb {
                        gemm_view(F::ONE, View::of(g).t(), va, F::ZERO, &mut d, 0);
                    } else {
                        gemm_view(F::ONE, va.t(), View::of(g), F::ZERO, &mut d, 0);
                    }
                    acc(b, d);
                }
            }
            &Op::AddBias { x, bias } => {
                if self.wants(bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(bias, db);
                }
                acc(x, g.clone());
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    acc(a, zip_map(g, val(b), |x, y| x * y));
                }
                if self.wants(b) {
                    acc(b, zip_map(g, val(a), |x, y| x * y));
                }
            }
            &Op::Scale(x, k) | &Op::Affine(x, k) => acc(x, g.map(|v| v * k)),
            &Op::Div(a, b) => {
                if self.wants(a) {
                    acc(a, zip_map(g, val(b), |d, y| d / y));
                }
                if self.wants(b) {
                    let gq = zip_map(g, y, |d, q| d * q);
                    acc(b, zip_map(&gq, val(b), |v, bb| -v / bb));
                }
            }
            Op::Sinusoid { x, freqs } => {
                let d = Matrix::from_fn(y.rows(), 1, |r, _| {
                    (0..y.cols())
                        .map(|c| {
                            let f = freqs[c / 2];
                            // sin' = f·cos, cos' = −f·sin
                            let partner = if c % 2 == 0 { y.get(r, c + 1) } else { -y.get(r, c - 1) };
                            g.get(r, c) * f * partner
                        })
                        .sum()
                });
                acc(*x, d);
            }
            &Op::MulRows { x, s } => {
                let (xm, sm) = (val(x), val(s));
                if self.wants(x) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let k = sm.get(r, 0);
                        for v in d.row_mut(r) {
                            *v *= k;
                        }
                    }
                    acc(x, d);
                }
                if self.wants(s) {
                    let d = Matrix::from_fn(sm.rows(), 1, |r, _| {
                        g.row(r).iter().zip(xm.row(r)).map(|(&a, &b)| a * b).sum()
                    });
                    acc(s, d);
                }
            }
            Op::MulConst { x, k } => acc(*x, zip_map(g, k, |a, b| a * b)),
            &Op::Relu(x) => acc(x, zip_map(g, val(x), |d, v| if v > F::ZERO { d } else { F::ZERO })),
            &Op::Sigmoid(x) => acc(x, zip_map(g, y, |d, s| d * s * (F::ONE - s))),
            &Op::Logit { x, eps } => acc(
                x,
                zip_map(g, val(x), |d, p| {
                    if p < eps || p > F::ONE - eps {
                        F::ZERO
                    } else {
                        d / (p * (F::ONE - p))
                    }
                }),
            ),
            &Op::Ln(x) => acc(x, zip_map(g, val(x), |d, v| d / v)),
            &Op::Abs(x) => acc(
                x,
                zip_map(g, val(x), |d, v| {
                    if v > F::ZERO {
                        d
                    } else if v < F::ZERO {
                        -d
                    } else {
                        F::ZERO
                    }
                }),
            ),
            &Op::Maximum(a, b) | &Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (am, bm) = (val(a), val(b));
                let pick_a = |x: F, z: F| if is_max { x >= z } else { x <= z };
                let da = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    if pick_a(am.get(r, c), bm.get(r, c)) {
                        g.get(r, c)
                    } else {
                        F::ZERO
                    }
                });
                let db = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    if pick_a(am.get(r, c), bm.get(r, c)) {
                        F::ZERO
                    } else {
                        g.get(r, c)
                    }
                });
                acc(a, da);
                acc(b, db);
            }
            &Op::Clamp { x, lo, hi } => acc(
                x,
                zip_map(g, val(x), |d, v| if v >= lo && v <= hi { d } else { F::ZERO }),
            ),
            &Op::SoftmaxRows(x) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: F = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for ((o, &gy), &yy) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yy * (gy - dot);
                    }
                }
                acc(x, d);
            }
            Op::NormalizeCols { x, row_mask, sums } => {
                let xm = val(*x);
                let valid = |r: usize| row_mask.as_ref().is_none_or(|m| m[r]);
                let mut weighted = vec![F::ZERO; xm.cols()];
                for r in (0..xm.rows()).filter(|&r| valid(r)) {
                    for (c, w) in weighted.iter_mut().enumerate() {
                        *w += g.get(r, c) * xm.get(r, c);
                    }
                }
                let d = Matrix::from_fn(xm.rows(), xm.cols(), |r, c| {
                    if valid(r) {
                        g.get(r, c) / sums[c] - weighted[c] / (sums[c] * sums[c])
                    } else {
                        F::ZERO
                    }
                });
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = val(*gamma);
                let (rows, cols) = xhat.shape();
                if self.wants(*gamma) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for (d, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*beta, db);
                }
                if self.wants(*x) {
                    let n = F::from_f64(cols as f64);
                    let mut d = Matrix::zeros(rows, cols);
                    for (r, &inv) in inv_std.iter().enumerate().take(rows) {
                        let dxhat: Vec<F> = (0..cols).map(|c| g.get(r, c) * gm.get(0, c)).collect();
                        let sum: F = dxhat.iter().copied().sum();
                        let dot: F = dxhat.iter().zip(xhat.row(r)).map(|(&a, &b)| a * b).sum();
                        for (c, &dx) in dxhat.iter().enumerate() {
                            let v = (n * dx - sum - xhat.get(r, c) * dot) * inv / n;
                            d.set(r, c, v);
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if self.wants(p) {
                        let idx: Vec<usize> = (off..off + rows).collect();
                        acc(p, g.select_rows(&idx));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if self.wants(p) {
                        acc(p, Matrix::from_fn(g.rows(), cols, |r, c| g.get(r, off + c)));
                    }
                    off += cols;
                }
            }
            &Op::SliceRows { x, start } => {
                let xm = val(x);
                let mut d = Matrix::zeros(xm.rows(), xm.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(x, d);
            }
            &Op::SliceCols { x, start } => {
                let xm = val(x);
                let mut d = Matrix::zeros(xm.rows(), xm.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(x, d);
            }
            &Op::Transpose(x) => acc(x, g.transpose()),
            Op::MaxPoolRows { x, argmax } => {
                let xm = val(*x);
                let mut d = Matrix::zeros(xm.rows(), xm.cols());
                for (c, &r) in argmax.iter().enumerate() {
                    d.set(r, c, g.get(0, c));
                }
                acc(*x, d);
            }
            &Op::Sum(x) => {
                let (r, c) = val(x).shape();
                acc(x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::GatherRows { x, idx } => {
                let xm = val(*x);
                let mut d = Matrix::zeros(xm.rows(), xm.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*x, d);
            }
            Op::Attention {
                parts,
                v,
                heads,
                scale,
                probs,
            } => {
                let heads = *heads;
                let vm = val(*v);
                let dvh = vm.cols() / heads;
                let (n, m) = (g.rows(), vm.rows());
                let mut dv = Matrix::zeros(vm.rows(), vm.cols());
                let mut dq: Vec<Matrix<F>> = parts.iter().map(|&(q, _)| Matrix::zeros(n, val(q).cols())).collect();
                let mut dk: Vec<Matrix<F>> = parts.iter().map(|&(_, k)| Matrix::zeros(m, val(k).cols())).collect();
                for (h, p) in probs.iter().enumerate() {
                    let go = View::of(g).cols(h * dvh, dvh);
                    let vh = View::of(vm).cols(h * dvh, dvh);
                    gemm_view(F::ONE, View::of(p).t(), go, F::ZERO, &mut dv, h * dvh);
                    let mut dp = Matrix::zeros(n, m);
                    gemm_view(F::ONE, go, vh.t(), F::ZERO, &mut dp, 0);
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
                    for r in 0..n {
                        let dot: F = dp.row(r).iter().zip(p.row(r)).map(|(&a, &b)| a * b).sum();
                        for (d, &pp) in dp.row_mut(r).iter_mut().zip(p.row(r)) {
                            *d = pp * (*d - dot) * *scale;
                        }
                    }
                    for (i, &(q, k)) in parts.iter().enumerate() {
                        let (qm, km) = (val(q), val(k));
                        let dh = qm.cols() / heads;
                        let kv = View::of(km).cols(h * dh, dh);
                        let qv = View::of(qm).cols(h * dh, dh);
                        gemm_view(F::ONE, View::of(&dp), kv, F::ZERO, &mut dq[i], h * dh);
                        gemm_view(F::ONE, View::of(&dp).t(), qv, F::ZERO, &mut dk[i], h * dh);
                    }
                }
                for (i, &(q, k)) in parts.iter().enumerate() {
                    acc(q, std::mem::take(&mut dq[i]));
                    acc(k, std::mem::take(&mut dk[i]));
                }
                acc(*v, dv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Compares analytic gradients of `f` against central differences for
    /// every entry of every parameter.
    fn check(store: ParamStore<f64>, f: impl Fn(&mut Graph<f64>) -> Var) {
        let loss_at = |s: &ParamStore<f64>| {
            let mut g = Graph::new(s);
            let l = f(&mut g);
            g.scalar(l)
        };
        let mut g = Graph::new(&store);
        let l = f(&mut g);
        let grads = g.backward(l);
        let h = 1e-6;
        for id in store.ids() {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| {
                let (r, c) = store.get(id).shape();
                Matrix::zeros(r, c)
            });
            for i in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[i] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{i}]: analytic {a}, numeric {numeric}", store.name(id));
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let a = s.add("a", random(&mut rng, 3, 4));
        let b = s.add("b", random(&mut rng, 4, 2));
        let c = s.add("c", random(&mut rng, 4, 2));
        let bias = s.add("bias", random(&mut rng, 1, 2));
        let r = s.add("r", random(&mut rng, 3, 1));
        check(s, |g| {
            let (a, b, c, bias, r) = (g.param(a), g.param(b), g.param(c), g.param(bias), g.param(r));
            let ab = g.matmul(a, b);
            let ab = g.add_bias(ab, bias);
            let act = g.sigmoid(ab);
            let t = g.matmul_nt(act, c);
            let t = g.matmul_tn(t, a);
            let rr = g.relu(t);
            let abs = g.abs(t);
            let m = g.mul(rr, abs);
            let scaled = g.scale(m, 0.3);
            let mr = g.mul_rows(act, r);
            let sq = g.transpose(mr);
            let mx = g.maximum(sq, sq);
            let s1 = g.sum(scaled);
            let s2 = g.sum(mx);
            let d = g.sub(s1, s2);
            let e = g.sigmoid(d);
            let l = g.logit(e, 1e-9);
            g.add(l, s1)
        });
    }

    #[test]
    fn normalization_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let x = s.add("x", random(&mut rng, 5, 4));
        let gamma = s.add("gamma", random(&mut rng, 1, 4));
        let beta = s.add("beta", random(&mut rng, 1, 4));
        let w = s.add("w", random(&mut rng, 5, 4));
        let mask = [true, true, false, true, true];
        check(s, move |g| {
            let (x, gamma, beta, w) = (g.param(x), g.param(gamma), g.param(beta), g.param(w));
            let ln = g.layer_norm(x, gamma, beta);
            let sm = g.softmax_rows(ln, Some(&[true, false, true, true]));
            let nc = g.normalize_cols(sm, Some(&mask), 1e-8);
            let p = g.mul(nc, w);
            let pool = g.max_pool_rows(p, Some(&mask));
            let sig = g.sigmoid(x);
            let lg = g.ln(sig);
            let s1 = g.sum(pool);
            let s2 = g.sum(lg);
            let col = g.slice_cols(sig, 1, 1);
            let enc = g.sinusoid(col, 6, 3.0);
            let aff = g.affine(sig, -2.0, 3.0);
            let q = g.div(enc, enc);
            let r = g.slice_cols(aff, 0, 1);
            let r = g.div(col, r);
            let s3 = g.sum(enc);
            let s4 = g.sum(q);
            let s5 = g.sum(r);
            g.add_all(&[s1, s2, s3, s4, s5])
        });
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        let a = s.add("a", random(&mut rng, 3, 4));
        let b = s.add("b", random(&mut rng, 2, 4));
        let w = s.add("w", random(&mut rng, 5, 6));
        check(s, |g| {
            let (a, b, w) = (g.param(a), g.param(b), g.param(w));
            let rows = g.concat_rows(&[a, b]);
            let top = g.slice_rows(rows, 1, 3);
            let cols = g.concat_cols(&[top, top]);
            let part = g.slice_cols(cols, 2, 6);
            let gathered = g.gather_rows(rows, &[4, 0, 0, 2, 1]);
            let gathered = g.slice_cols(gathered, 0, 3);
            let gathered = g.concat_cols(&[gathered, gathered]);
            let prod = g.mul(gathered, w);
            let clamped = g.clamp(prod, -0.2, 0.2);
            let mn = g.minimum(part, part);
            let s1 = g.sum(clamped);
            let s2 = g.sum(mn);
            let sq = g.mul(s2, s2);
            g.add(s1, sq)
        });
    }

    #[test]
    fn attention_gradients_and_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let q1 = s.add("q1", random(&mut rng, 3, 4));
        let k1 = s.add("k1", random(&mut rng, 5, 4));
        let q2 = s.add("q2", random(&mut rng, 3, 6));
        let k2 = s.add("k2", random(&mut rng, 5, 6));
        let v = s.add("v", random(&mut rng, 5, 4));
        let w = s.add("w", random(&mut rng, 3, 4));
        let mask = [true, true, false, true, false];
        check(s.clone(), move |g| {
            let parts = [(g.param(q1), g.param(k1)), (g.param(q2), g.param(k2))];
            let vv = g.param(v);
            let o = g.attention(&parts, vv, 2, Some(&mask));
            let ww = g.param(w);
            let m = g.mul(o, ww);
            g.sum(m)
        });

        let mut g = Graph::new(&s);
        let parts = [(g.param(q1), g.param(k1))];
        let vv = g.param(v);
        let o = g.attention(&parts, vv, 2, Some(&mask));
        for p in g.attention_probs(o).unwrap() {
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(p.get(r, 2), 0.0);
                assert_eq!(p.get(r, 4), 0.0);
            }
        }
    }

    #[test]
    fn single_head_attention_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let q = random(&mut rng, 2, 3);
        let k = random(&mut rng, 4, 3);
        let v = random(&mut rng, 4, 2);
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let o = g.attention(&[(qv, kv)], vv, 1, None);
        let mut scores = q.matmul(&k.transpose());
        scores.scale_assign(1.0 / 3f64.sqrt());
        softmax_rows_in_place(&mut scores, None);
        let naive = scores.matmul(&v);
        for (a, b) in g.value(o).data().iter().zip(naive.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
