//! Neural-net layers over the autodiff tape: parameter store, linear and
//! kernel-3 1-D convolution layers, layer norm, multi-head attention, FFN.
//!
//! Parameters live in a [`ParamSet`] in deterministic insertion order (the
//! checkpoint blob order). Layers hold ids into the set; a [`TapeBinding`]
//! memoizes one tape leaf per parameter per forward pass, so a parameter
//! used at several pyramid levels (shared heads) accumulates gradients from
//! every use.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Real, Tape, Val};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter tensors in insertion order.
pub struct ParamSet<F: Real> {
    names: Vec<String>,
    values: Vec<Arc<Array2<F>>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Arc<Array2<F>> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Array2<F>) {
        assert_eq!(
            self.values[id.0].dim(),
            value.dim(),
            "shape change for {}",
            self.names[id.0]
        );
        self.values[id.0] = Arc::new(value);
    }

    /// In-place update; clones the buffer only if a tape still shares it.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Array2<F>)) {
        f(Arc::make_mut(&mut self.values[id.0]));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Array2<F>>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// One tape leaf per parameter per forward pass.
pub struct TapeBinding {
    vals: Vec<Option<Val>>,
}

impl TapeBinding {
    pub fn new<F: Real>(params: &ParamSet<F>) -> Self {
        TapeBinding {
            vals: vec![None; params.len()],
        }
    }

    pub fn val<F: Real>(&mut self, tape: &mut Tape<F>, params: &ParamSet<F>, id: ParamId) -> Val {
        if let Some(v) = self.vals[id.0] {
            return v;
        }
        let v = tape.leaf(Arc::clone(params.value(id)));
        self.vals[id.0] = Some(v);
        v
    }

    /// The tape leaf a parameter was bound to, if it was used this pass.
    pub fn bound(&self, id: ParamId) -> Option<Val> {
        self.vals[id.0]
    }
}

/// Draw an `[r x c]` matrix with N(0, std^2) entries. Draws are made in f64
/// so f32 and f64 models initialized from the same seed agree bit-for-bit
/// after rounding.
pub fn normal_matrix<F: Real>(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("normal std");
    Array2::from_shape_fn((r, c), |_| F::from_f64(dist.sample(rng)))
}

pub fn uniform_f64(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        std: f64,
    ) -> Self {
        Self::with_bias(ps, rng, name, din, dout, std, 0.0)
    }

    pub fn with_bias<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        std: f64,
        bias: f64,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), normal_matrix(rng, din, dout, std));
        let b = ps.add(
            format!("{name}.b"),
            Array2::from_elem((1, dout), F::from_f64(bias)),
        );
        Linear { w, b }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        x: Val,
    ) -> Val {
        let w = bind.val(tape, ps, self.w);
        let b = bind.val(tape, ps, self.b);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

/// Kernel-3, same-padding 1-D convolution over the row (time) axis,
/// realized as three shifted matrix products. Invalid rows are zeroed
/// before the convolution so tail padding cannot leak into valid rows.
pub struct Conv1d3 {
    pub w_prev: ParamId,
    pub w_cur: ParamId,
    pub w_next: ParamId,
    pub b: ParamId,
}

impl Conv1d3 {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        std: f64,
        bias: f64,
    ) -> Self {
        Conv1d3 {
            w_prev: ps.add(format!("{name}.w_prev"), normal_matrix(rng, din, dout, std)),
            w_cur: ps.add(format!("{name}.w_cur"), normal_matrix(rng, din, dout, std)),
            w_next: ps.add(format!("{name}.w_next"), normal_matrix(rng, din, dout, std)),
            b: ps.add(
                format!("{name}.b"),
                Array2::from_elem((1, dout), F::from_f64(bias)),
            ),
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        x: Val,
        valid: &Arc<Vec<bool>>,
    ) -> Val {
        let xm = tape.row_mask(x, Arc::clone(valid));
        let xp = tape.shift_rows(xm, 1);
        let xn = tape.shift_rows(xm, -1);
        let wp = bind.val(tape, ps, self.w_prev);
        let wc = bind.val(tape, ps, self.w_cur);
        let wn = bind.val(tape, ps, self.w_next);
        let b = bind.val(tape, ps, self.b);
        let yp = tape.matmul(xp, wp);
        let yc = tape.matmul(xm, wc);
        let yn = tape.matmul(xn, wn);
        let s1 = tape.add(yp, yc);
        let s2 = tape.add(s1, yn);
        tape.add_bias(s2, b)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: ps.add(format!("{name}.gamma"), Array2::from_elem((1, d), F::one())),
            beta: ps.add(format!("{name}.beta"), Array2::zeros((1, d))),
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        x: Val,
    ) -> Val {
        let g = bind.val(tape, ps, self.gamma);
        let b = bind.val(tape, ps, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head attention. The caller supplies the `[Tq x Tk]` visibility mask
/// (window and/or key validity); rows of invalid queries come out zero.
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Self {
        assert!(n_heads >= 1 && d_model % n_heads == 0, "heads must divide d_model");
        let std = (1.0 / d_model as f64).sqrt();
        MultiHeadAttention {
            q: Linear::new(ps, rng, &format!("{name}.q"), d_model, d_model, std),
            k: Linear::new(ps, rng, &format!("{name}.k"), d_model, d_model, std),
            v: Linear::new(ps, rng, &format!("{name}.v"), d_model, d_model, std),
            out: Linear::new(ps, rng, &format!("{name}.out"), d_model, d_model, std),
            n_heads,
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        queries: Val,
        keys_values: Val,
        mask: &Arc<Array2<bool>>,
        q_valid: &Arc<Vec<bool>>,
    ) -> Val {
        let (_, d) = tape.shape(queries);
        let dh = d / self.n_heads;
        let q = self.q.forward(tape, bind, ps, queries);
        let k = self.k.forward(tape, bind, ps, keys_values);
        let v = self.v.forward(tape, bind, ps, keys_values);
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.col_slice(q, h * dh, dh);
            let kh = tape.col_slice(k, h * dh, dh);
            let vh = tape.col_slice(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let probs = tape.masked_softmax_rows(scores, Arc::clone(mask));
            heads.push(tape.matmul(probs, vh));
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let y = self.out.forward(tape, bind, ps, ctx);
        tape.row_mask(y, Arc::clone(q_valid))
    }
}

/// Two-layer position-wise feed-forward with ReLU.
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        expansion: usize,
    ) -> Self {
        let hidden = d_model * expansion;
        FeedForward {
            lin1: Linear::new(
                ps,
                rng,
                &format!("{name}.lin1"),
                d_model,
                hidden,
                (2.0 / d_model as f64).sqrt(),
            ),
            lin2: Linear::new(
                ps,
                rng,
                &format!("{name}.lin2"),
                hidden,
                d_model,
                (1.0 / hidden as f64).sqrt(),
            ),
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        x: Val,
    ) -> Val {
        let h = self.lin1.forward(tape, bind, ps, x);
        let h = tape.relu(h);
        self.lin2.forward(tape, bind, ps, h)
    }
}

/// Inverted dropout as a constant mask multiply; inactive at `p = 0` or in
/// eval mode (no RNG).
pub struct DropoutCtx {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl DropoutCtx {
    pub fn eval() -> Self {
        DropoutCtx { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: ChaCha8Rng) -> Self {
        DropoutCtx {
            p,
            rng: if p > 0.0 { Some(rng) } else { None },
        }
    }

    pub fn apply<F: Real>(&mut self, tape: &mut Tape<F>, x: Val) -> Val {
        let rng = match &mut self.rng {
            Some(r) if self.p > 0.0 => r,
            _ => return x,
        };
        let (r, c) = tape.shape(x);
        let keep = 1.0 - self.p;
        let inv = F::from_f64(1.0 / keep);
        let mask = Array2::from_shape_fn((r, c), |_| {
            if rng.gen_range(0.0..1.0) < keep {
                inv
            } else {
                F::zero()
            }
        });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

/// Visibility mask for windowed local self-attention: position `i` sees valid
/// `j` with `|i - j| <= (window-1)/2`.
pub fn local_attention_mask(t: usize, window: usize, valid: &[bool]) -> Array2<bool> {
    assert!(window % 2 == 1, "window must be odd");
    let radius = (window - 1) / 2;
    Array2::from_shape_fn((t, t), |(i, j)| {
        valid[i] && valid[j] && i.abs_diff(j) <= radius
    })
}

/// Visibility mask for cross-attention: every valid query sees every valid key.
pub fn cross_attention_mask(tq: usize, q_valid: &[bool], k_valid: &[bool]) -> Array2<bool> {
    assert_eq!(tq, q_valid.len());
    Array2::from_shape_fn((tq, k_valid.len()), |(i, j)| q_valid[i] && k_valid[j])
}
