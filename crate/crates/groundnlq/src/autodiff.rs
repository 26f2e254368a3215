//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! Every tensor in the model is a `[rows x cols]` array of `F` (f32 or f64;
//! sequences are `[T x d]`, scalars are `[1 x 1]`). A forward pass records
//! nodes on a [`Tape`]; [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients per node. Each sample gets its own tape, so batch
//! parallelism needs no locking.
//!
//! The op set is closed and small: matrix products, elementwise arithmetic,
//! activations, layer normalization, masked row-softmax, row shifting and
//! masking (convolution plumbing), column slicing/concatenation (attention
//! heads), stride-2 masked max-pooling, and the two loss kernels. Backward
//! formulas are hand-derived and pinned by finite-difference tests.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};

/// Scalar type the engine is generic over. f32 for training, f64 for
/// gradient-check oracles.
pub trait Real: ndarray::NdFloat {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

enum Storage<F> {
    Owned(Array2<F>),
    Shared(Arc<Array2<F>>),
}

impl<F> Storage<F> {
    fn get(&self) -> &Array2<F> {
        match self {
            Storage::Owned(a) => a,
            Storage::Shared(a) => a,
        }
    }
}

/// Per-element pooling provenance: source offset 0/1, or -1 when no valid
/// source existed.
type PoolKeep = Array2<i8>;

enum Op<F: Real> {
    Leaf,
    Matmul { a: usize, b: usize },
    /// `a . b^T`
    MatmulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// `a + bias`, bias is `[1 x n]` broadcast over rows.
    AddBias { a: usize, bias: usize },
    Scale { a: usize, c: F },
    Mul { a: usize, b: usize },
    Relu { a: usize },
    Softplus { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: F },
    MaskedSoftmaxRows { a: usize },
    RowMask { a: usize, valid: Arc<Vec<bool>> },
    ShiftRows { a: usize, offset: isize },
    ColSlice { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SelectRows { a: usize, rows: Arc<Vec<usize>> },
    SumAll { a: usize },
    MaxPool2 { a: usize, keep: PoolKeep },
    FocalLoss { logits: usize, labels: Arc<Vec<i8>>, alpha: F, gamma: F },
    DiouLoss { pred: usize, target: Arc<Array2<F>> },
}

struct Node<F: Real> {
    value: Storage<F>,
    op: Op<F>,
}

/// Gradients of one backward pass, indexed by the tape's node ids.
pub struct Gradients<F: Real> {
    by_id: Vec<Option<Array2<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`, zeros if the node was never reached.
    pub fn get(&self, v: Val) -> Option<&Array2<F>> {
        self.by_id[v.0].as_ref()
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus_scalar<F: Real>(x: F) -> F {
    let zero = F::zero();
    x.max(zero) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid_scalar<F: Real>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Array2<F> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Val) -> (usize, usize) {
        let d = self.value(v).dim();
        (d.0, d.1)
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Val {
        self.nodes.push(Node {
            value: Storage::Owned(value),
            op,
        });
        Val(self.nodes.len() - 1)
    }

    /// Insert a leaf that shares its buffer with the caller (parameters).
    pub fn leaf(&mut self, value: Arc<Array2<F>>) -> Val {
        self.nodes.push(Node {
            value: Storage::Shared(value),
            op: Op::Leaf,
        });
        Val(self.nodes.len() - 1)
    }

    /// Insert an owned leaf (inputs, constants).
    pub fn constant(&mut self, value: Array2<F>) -> Val {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Val {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, rb, "matmul {}x{} . {}x{}", ra, ca, rb, cb);
        let y = self.value(a).dot(self.value(b));
        self.push(y, Op::Matmul { a: a.0, b: b.0 })
    }

    /// `a . b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Val, b: Val) -> Val {
        let (_, ca) = self.shape(a);
        let (_, cb) = self.shape(b);
        assert_eq!(ca, cb, "matmul_nt inner dims");
        let y = self.value(a).dot(&self.value(b).t());
        self.push(y, Op::MatmulNT { a: a.0, b: b.0 })
    }

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn add_bias(&mut self, a: Val, bias: Val) -> Val {
        let (_, ca) = self.shape(a);
        let (rb, cb) = self.shape(bias);
        assert_eq!((rb, cb), (1, ca), "bias must be [1 x cols]");
        let y = self.value(a) + self.value(bias);
        self.push(y, Op::AddBias { a: a.0, bias: bias.0 })
    }

    pub fn scale(&mut self, a: Val, c: F) -> Val {
        let y = self.value(a).mapv(|x| x * c);
        self.push(y, Op::Scale { a: a.0, c })
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let y = self.value(a) * self.value(b);
        self.push(y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Val {
        let nb = self.scale(b, -F::one());
        self.add(a, nb)
    }

    pub fn relu(&mut self, a: Val) -> Val {
        let y = self.value(a).mapv(|x| x.max(F::zero()));
        self.push(y, Op::Relu { a: a.0 })
    }

    pub fn softplus(&mut self, a: Val) -> Val {
        let y = self.value(a).mapv(softplus_scalar);
        self.push(y, Op::Softplus { a: a.0 })
    }

    /// Row-wise layer normalization with learned gain/shift (`[1 x n]` each).
    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val) -> Val {
        let eps = F::from_f64(1e-5);
        let (_, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut y = xv.clone();
        for mut row in y.rows_mut() {
            let (mu, s) = row_moments(&row.to_owned(), eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) / s * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(
            y,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// Softmax over each row restricted to `mask`; rows with no visible entry
    /// come out all-zero. Masked-out entries are exactly zero.
    pub fn masked_softmax_rows(&mut self, a: Val, mask: Arc<Array2<bool>>) -> Val {
        let (r, c) = self.shape(a);
        assert_eq!(mask.dim(), (r, c), "softmax mask shape");
        let xv = self.value(a);
        let mut y = Array2::zeros((r, c));
        for i in 0..r {
            let mut m = F::neg_infinity();
            for j in 0..c {
                if mask[[i, j]] {
                    m = m.max(xv[[i, j]]);
                }
            }
            if m == F::neg_infinity() {
                continue; // no visible key: row stays zero
            }
            let mut z = F::zero();
            for j in 0..c {
                if mask[[i, j]] {
                    let e = (xv[[i, j]] - m).exp();
                    y[[i, j]] = e;
                    z = z + e;
                }
            }
            for j in 0..c {
                y[[i, j]] = y[[i, j]] / z;
            }
        }
        self.push(y, Op::MaskedSoftmaxRows { a: a.0 })
    }

    /// Zero out invalid rows.
    pub fn row_mask(&mut self, a: Val, valid: Arc<Vec<bool>>) -> Val {
        let (r, _) = self.shape(a);
        assert_eq!(valid.len(), r, "row mask length");
        let mut y = self.value(a).clone();
        for (i, ok) in valid.iter().enumerate() {
            if !ok {
                y.row_mut(i).fill(F::zero());
            }
        }
        self.push(y, Op::RowMask { a: a.0, valid })
    }

    /// Shift rows by `offset` (positive = down); vacated rows are zero.
    pub fn shift_rows(&mut self, a: Val, offset: isize) -> Val {
        let (r, c) = self.shape(a);
        let xv = self.value(a);
        let mut y = Array2::zeros((r, c));
        for t in 0..r as isize {
            let src = t - offset;
            if src >= 0 && src < r as isize {
                y.row_mut(t as usize).assign(&xv.row(src as usize));
            }
        }
        self.push(y, Op::ShiftRows { a: a.0, offset })
    }

    pub fn col_slice(&mut self, a: Val, start: usize, len: usize) -> Val {
        let (_, c) = self.shape(a);
        assert!(start + len <= c, "col slice bounds");
        let y = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(y, Op::ColSlice { a: a.0, start })
    }

    pub fn concat_cols(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        self.push(
            y,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    /// Gather rows by index (duplicates accumulate on backward).
    pub fn select_rows(&mut self, a: Val, rows: Arc<Vec<usize>>) -> Val {
        let (r, c) = self.shape(a);
        let xv = self.value(a);
        let mut y = Array2::zeros((rows.len(), c));
        for (k, &i) in rows.iter().enumerate() {
            assert!(i < r, "select_rows index");
            y.row_mut(k).assign(&xv.row(i));
        }
        self.push(y, Op::SelectRows { a: a.0, rows })
    }

    /// Sum of all entries as a `[1 x 1]` scalar.
    pub fn sum_all(&mut self, a: Val) -> Val {
        let s = self.value(a).sum();
        self.push(
            Array2::from_elem((1, 1), s),
            Op::SumAll { a: a.0 },
        )
    }

    /// Stride-2 max pool over rows, skipping invalid sources. Output row `r`
    /// pools rows `2r` and `2r+1` (the odd tail pools alone). Returns the
    /// pooled value and the validity of each output row (valid iff at least
    /// one source was). Positions with no valid source are zero; ties route
    /// the gradient to the earlier source.
    pub fn max_pool2(&mut self, a: Val, valid: &[bool]) -> (Val, Vec<bool>) {
        let (t, c) = self.shape(a);
        assert_eq!(valid.len(), t, "pool mask length");
        assert!(t >= 1, "pool on empty sequence");
        let out_t = t.div_ceil(2);
        let xv = self.value(a);
        let mut y = Array2::zeros((out_t, c));
        let mut keep = Array2::from_elem((out_t, c), -1i8);
        let mut out_valid = vec![false; out_t];
        for r in 0..out_t {
            let s0 = 2 * r;
            let s1 = 2 * r + 1;
            let v0 = valid[s0];
            let v1 = s1 < t && valid[s1];
            out_valid[r] = v0 || v1;
            for j in 0..c {
                if v0 && v1 {
                    // tie keeps the earlier source
                    if xv[[s0, j]] >= xv[[s1, j]] {
                        y[[r, j]] = xv[[s0, j]];
                        keep[[r, j]] = 0;
                    } else {
                        y[[r, j]] = xv[[s1, j]];
                        keep[[r, j]] = 1;
                    }
                } else if v0 {
                    y[[r, j]] = xv[[s0, j]];
                    keep[[r, j]] = 0;
                } else if v1 {
                    y[[r, j]] = xv[[s1, j]];
                    keep[[r, j]] = 1;
                }
            }
        }
        let v = self.push(y, Op::MaxPool2 { a: a.0, keep });
        (v, out_valid)
    }

    /// Per-position sigmoid focal loss. `logits` is `[T x 1]`; `labels[t]` is
    /// 1 (foreground), 0 (background) or -1 (ignored, contributes zero).
    /// Output is `[T x 1]` unreduced losses.
    pub fn focal_loss(&mut self, logits: Val, labels: Arc<Vec<i8>>, alpha: F, gamma: F) -> Val {
        let (t, c) = self.shape(logits);
        assert_eq!(c, 1, "focal loss expects [T x 1] logits");
        assert_eq!(labels.len(), t, "focal labels length");
        let z = self.value(logits);
        let one = F::one();
        let mut y = Array2::zeros((t, 1));
        for i in 0..t {
            let zi = z[[i, 0]];
            y[[i, 0]] = match labels[i] {
                1 => alpha * (-gamma * softplus_scalar(zi)).exp() * softplus_scalar(-zi),
                0 => (one - alpha) * (-gamma * softplus_scalar(-zi)).exp() * softplus_scalar(zi),
                _ => F::zero(),
            };
        }
        self.push(
            y,
            Op::FocalLoss {
                logits: logits.0,
                labels,
                alpha,
                gamma,
            },
        )
    }

    /// Per-position distance-IoU loss, `1 - IoU + (center gap / enclosing
    /// length)^2`, on intervals `[-d_start, d_end]` around a shared anchor.
    /// `pred` is `[K x 2]` nonnegative distances, `target` likewise (constant).
    /// Output is `[K x 1]`. A degenerate zero-width prediction gives IoU 0.
    pub fn diou_loss(&mut self, pred: Val, target: Arc<Array2<F>>) -> Val {
        let (k, c) = self.shape(pred);
        assert_eq!(c, 2, "diou expects [K x 2]");
        assert_eq!(target.dim(), (k, 2), "diou target shape");
        let p = self.value(pred);
        let mut y = Array2::zeros((k, 1));
        for i in 0..k {
            let (l, _, _) = diou_terms(p[[i, 0]], p[[i, 1]], target[[i, 0]], target[[i, 1]]);
            y[[i, 0]] = l;
        }
        self.push(
            y,
            Op::DiouLoss {
                pred: pred.0,
                target,
            },
        )
    }

    /// Hash of every nondifferentiable branch decision taken this forward
    /// pass: ReLU activation signs, pool argmax choices, DIoU min/max
    /// branches. Two evaluations on the same smooth piece of the loss
    /// surface share a fingerprint; finite differences are only trustworthy
    /// when the probe points do.
    pub fn regime_fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325; // FNV-1a
        let mut eat = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { .. } => {
                    let mut acc: u8 = 0;
                    let mut n = 0;
                    for v in node.value.get().iter() {
                        acc = (acc << 1) | (*v > F::zero()) as u8;
                        n += 1;
                        if n == 8 {
                            eat(acc);
                            acc = 0;
                            n = 0;
                        }
                    }
                    eat(acc);
                }
                Op::MaxPool2 { keep, .. } => {
                    for k in keep.iter() {
                        eat(*k as u8);
                    }
                }
                Op::DiouLoss { pred, target } => {
                    let p = self.nodes[*pred].value.get();
                    for i in 0..p.nrows() {
                        let bits = ((p[[i, 0]] <= target[[i, 0]]) as u8)
                            | (((p[[i, 1]] <= target[[i, 1]]) as u8) << 1)
                            | (((p[[i, 0]] >= target[[i, 0]]) as u8) << 2)
                            | (((p[[i, 1]] >= target[[i, 1]]) as u8) << 3);
                        eat(bits);
                    }
                }
                _ => {}
            }
        }
        hash
    }

    /// Reverse pass from `loss`, seeded with ones. Returns per-node gradients.
    pub fn backward(&self, loss: Val) -> Gradients<F> {
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.shape(loss);
        grads[loss.0] = Some(Array2::ones((r, c)));

        for id in (0..self.nodes.len()).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_backward(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { by_id: grads }
    }

    fn step_backward(&self, id: usize, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        fn acc<F: Real>(grads: &mut [Option<Array2<F>>], id: usize, delta: Array2<F>) {
            match &mut grads[id] {
                Some(e) => *e += &delta,
                slot => *slot = Some(delta),
            }
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let av = self.nodes[*a].value.get();
                let bv = self.nodes[*b].value.get();
                acc(grads, *a, g.dot(&bv.t()));
                acc(grads, *b, av.t().dot(g));
            }
            Op::MatmulNT { a, b } => {
                // y = a b^T: da = g b ; db = g^T a
                let av = self.nodes[*a].value.get();
                let bv = self.nodes[*b].value.get();
                acc(grads, *a, g.dot(bv));
                acc(grads, *b, g.t().dot(av));
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddBias { a, bias } => {
                acc(grads, *a, g.clone());
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(grads, *bias, db);
            }
            Op::Scale { a, c } => {
                acc(grads, *a, g.mapv(|x| x * *c));
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.get();
                let bv = self.nodes[*b].value.get();
                acc(grads, *a, g * bv);
                acc(grads, *b, g * av);
            }
            Op::Relu { a } => {
                let av = self.nodes[*a].value.get();
                let mut d = g.clone();
                d.zip_mut_with(av, |gi, &xi| {
                    if xi <= F::zero() {
                        *gi = F::zero();
                    }
                });
                acc(grads, *a, d);
            }
            Op::Softplus { a } => {
                let av = self.nodes[*a].value.get();
                let mut d = g.clone();
                d.zip_mut_with(av, |gi, &xi| *gi = *gi * sigmoid_scalar(xi));
                acc(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.nodes[*x].value.get();
                let gv = self.nodes[*gamma].value.get();
                let (r, n) = xv.dim();
                let nf = F::from_f64(n as f64);
                let mut dx = Array2::zeros((r, n));
                let mut dgamma = Array2::zeros((1, n));
                let mut dbeta = Array2::zeros((1, n));
                for i in 0..r {
                    let row = xv.row(i).to_owned();
                    let (mu, s) = row_moments(&row, *eps);
                    // gy = g * gamma ; dx = (gy - mean(gy) - xhat*mean(gy*xhat)) / s
                    let mut mean_gy = F::zero();
                    let mut mean_gyx = F::zero();
                    for j in 0..n {
                        let xhat = (row[j] - mu) / s;
                        let gy = g[[i, j]] * gv[[0, j]];
                        mean_gy = mean_gy + gy;
                        mean_gyx = mean_gyx + gy * xhat;
                        dgamma[[0, j]] = dgamma[[0, j]] + g[[i, j]] * xhat;
                        dbeta[[0, j]] = dbeta[[0, j]] + g[[i, j]];
                    }
                    mean_gy = mean_gy / nf;
                    mean_gyx = mean_gyx / nf;
                    for j in 0..n {
                        let xhat = (row[j] - mu) / s;
                        let gy = g[[i, j]] * gv[[0, j]];
                        dx[[i, j]] = (gy - mean_gy - xhat * mean_gyx) / s;
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::MaskedSoftmaxRows { a } => {
                // ds = p * (g - <g, p>) rowwise; zero rows stay zero.
                let p = self.nodes[id].value.get();
                let (r, c) = p.dim();
                let mut d = Array2::zeros((r, c));
                for i in 0..r {
                    let mut dot = F::zero();
                    for j in 0..c {
                        dot = dot + g[[i, j]] * p[[i, j]];
                    }
                    for j in 0..c {
                        d[[i, j]] = p[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::RowMask { a, valid } => {
                let mut d = g.clone();
                for (i, ok) in valid.iter().enumerate() {
                    if !ok {
                        d.row_mut(i).fill(F::zero());
                    }
                }
                acc(grads, *a, d);
            }
            Op::ShiftRows { a, offset } => {
                let (r, c) = g.dim();
                let mut d = Array2::zeros((r, c));
                for t in 0..r as isize {
                    let src = t - offset;
                    if src >= 0 && src < r as isize {
                        d.row_mut(src as usize).assign(&g.row(t as usize));
                    }
                }
                acc(grads, *a, d);
            }
            Op::ColSlice { a, start } => {
                let (ra, ca) = self.nodes[*a].value.get().dim();
                let (_, len) = g.dim();
                let mut d = Array2::zeros((ra, ca));
                d.slice_mut(ndarray::s![.., *start..*start + len]).assign(g);
                acc(grads, *a, d);
            }
            Op::ConcatCols { parts } => {
                let mut at = 0;
                for p in parts {
                    let (_, w) = self.nodes[*p].value.get().dim();
                    let d = g.slice(ndarray::s![.., at..at + w]).to_owned();
                    acc(grads, *p, d);
                    at += w;
                }
            }
            Op::SelectRows { a, rows } => {
                let (ra, ca) = self.nodes[*a].value.get().dim();
                let mut d = Array2::zeros((ra, ca));
                for (k, &i) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(i);
                    dst += &g.row(k);
                }
                acc(grads, *a, d);
            }
            Op::SumAll { a } => {
                let (ra, ca) = self.nodes[*a].value.get().dim();
                acc(grads, *a, Array2::from_elem((ra, ca), g[[0, 0]]));
            }
            Op::MaxPool2 { a, keep } => {
                let (ra, ca) = self.nodes[*a].value.get().dim();
                let (rt, _) = g.dim();
                let mut d = Array2::zeros((ra, ca));
                for r in 0..rt {
                    for j in 0..ca {
                        let k = keep[[r, j]];
                        if k >= 0 {
                            let src = 2 * r + k as usize;
                            d[[src, j]] = d[[src, j]] + g[[r, j]];
                        }
                    }
                }
                acc(grads, *a, d);
            }
            Op::FocalLoss {
                logits,
                labels,
                alpha,
                gamma,
            } => {
                let z = self.nodes[*logits].value.get();
                let one = F::one();
                let (t, _) = z.dim();
                let mut d = Array2::zeros((t, 1));
                for i in 0..t {
                    let zi = z[[i, 0]];
                    let p = sigmoid_scalar(zi);
                    let dz = match labels[i] {
                        1 => {
                            // d/dz [ alpha (1-p)^g (-ln p) ]
                            *alpha
                                * (-*gamma * softplus_scalar(zi)).exp()
                                * (-*gamma * p * softplus_scalar(-zi) - (one - p))
                        }
                        0 => {
                            (one - *alpha)
                                * (-*gamma * softplus_scalar(-zi)).exp()
                                * (*gamma * (one - p) * softplus_scalar(zi) + p)
                        }
                        _ => F::zero(),
                    };
                    d[[i, 0]] = g[[i, 0]] * dz;
                }
                acc(grads, *logits, d);
            }
            Op::DiouLoss { pred, target } => {
                let p = self.nodes[*pred].value.get();
                let (k, _) = p.dim();
                let mut d = Array2::zeros((k, 2));
                for i in 0..k {
                    let (_, dla, dlb) =
                        diou_terms(p[[i, 0]], p[[i, 1]], target[[i, 0]], target[[i, 1]]);
                    d[[i, 0]] = g[[i, 0]] * dla;
                    d[[i, 1]] = g[[i, 0]] * dlb;
                }
                acc(grads, *pred, d);
            }
        }
    }
}

fn row_moments<F: Real>(row: &Array1<F>, eps: F) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mu = row.sum() / n;
    let var = row.mapv(|v| (v - mu) * (v - mu)).sum() / n;
    (mu, (var + eps).sqrt())
}

/// DIoU loss value and its derivatives w.r.t. the predicted distances.
/// Intervals are `[-a, b]` around a shared anchor. Ties in min/max route the
/// derivative to the prediction, deterministically.
fn diou_terms<F: Real>(ap: F, bp: F, at: F, bt: F) -> (F, F, F) {
    let one = F::one();
    let two = F::from_f64(2.0);
    let zero = F::zero();

    let inter = ap.min(at) + bp.min(bt);
    let union = (ap + bp) + (at + bt) - inter;
    let (iou, diou_da, diou_db) = if union > zero {
        let di_da = if ap <= at { one } else { zero };
        let di_db = if bp <= bt { one } else { zero };
        let du_da = one - di_da;
        let du_db = one - di_db;
        let iou = inter / union;
        (
            iou,
            (di_da * union - inter * du_da) / (union * union),
            (di_db * union - inter * du_db) / (union * union),
        )
    } else {
        (zero, zero, zero)
    };

    let gap = (bp - ap) / two - (bt - at) / two;
    let enc = ap.max(at) + bp.max(bt);
    let (pen, dpen_da, dpen_db) = if enc > zero {
        let de_da = if ap >= at { one } else { zero };
        let de_db = if bp >= bt { one } else { zero };
        let r = gap / enc;
        let dgap_da = -one / two;
        let dgap_db = one / two;
        (
            r * r,
            two * r * (dgap_da * enc - gap * de_da) / (enc * enc),
            two * r * (dgap_db * enc - gap * de_db) / (enc * enc),
        )
    } else {
        (zero, zero, zero)
    };

    (one - iou + pen, -diou_da + dpen_da, -diou_db + dpen_db)
}
