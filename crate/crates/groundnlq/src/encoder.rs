//! Input projections and the multi-modal transformer encoder.
//!
//! Video features go through two kernel-3 1-D convolutions (each with layer
//! norm and ReLU) and receive a fixed sin-cos position table; text tokens go
//! through two position-wise linear layers (no positions; token order is
//! left to text self-attention). The text encoder is 4 vanilla pre-norm
//! transformer blocks. The video encoder is 4 blocks of windowed local
//! self-attention, cross-attention into the encoded text (early fusion),
//! and an FFN, each wrapped in a pre-norm residual.

use std::sync::Arc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Val};
use crate::error::{Error, Result};
use crate::nn::{
    cross_attention_mask, local_attention_mask, Conv1d3, DropoutCtx, FeedForward, LayerNorm,
    Linear, MultiHeadAttention, ParamSet, TapeBinding,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Multi-scale blocks without a cross-modal layer.
    Base,
    /// Multi-scale blocks with a cross-modal layer after the pooling step.
    Star,
}

/// Architecture hyperparameters. Depths follow the reference design (4 text
/// blocks, 4 video blocks, 6 multi-scale blocks); widths are desk-scale
/// defaults and config-exposed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Local-attention window (odd).
    pub window: usize,
    pub n_text_blocks: usize,
    pub n_video_blocks: usize,
    pub n_pyramid_blocks: usize,
    pub ffn_expansion: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub d_video_in: usize,
    pub d_text_in: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            n_heads: 4,
            window: 9,
            n_text_blocks: 4,
            n_video_blocks: 4,
            n_pyramid_blocks: 6,
            ffn_expansion: 4,
            dropout: 0.0,
            variant: Variant::Base,
            d_video_in: 64,
            d_text_in: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for sin-cos positions".into()));
        }
        if self.window % 2 == 0 || self.window < 1 {
            return Err(Error::Config(format!("window ({}) must be odd and >= 1", self.window)));
        }
        if self.n_text_blocks < 1 || self.n_video_blocks < 1 || self.n_pyramid_blocks < 1 {
            return Err(Error::Config("block counts must be >= 1".into()));
        }
        if self.ffn_expansion < 1 {
            return Err(Error::Config("ffn_expansion must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.d_video_in < 1 || self.d_text_in < 1 {
            return Err(Error::Config("input widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Pyramid depth including the input level.
    pub fn n_levels(&self) -> usize {
        self.n_pyramid_blocks + 1
    }
}

/// A sequence on the tape plus its validity mask (prefix-valid).
#[derive(Clone)]
pub struct Embedded {
    pub x: Val,
    pub valid: Arc<Vec<bool>>,
}

/// Fixed sin-cos position table: entry `(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `(pos, 2i+1) = cos(...)`.
pub fn sinusoidal_positions<F: Real>(t: usize, d: usize) -> Result<Array2<F>> {
    if t < 1 {
        return Err(Error::Validation("position table needs T >= 1".into()));
    }
    if d % 2 != 0 || d == 0 {
        return Err(Error::Validation(format!(
            "position table needs even width, got {d}"
        )));
    }
    let mut table = Array2::zeros((t, d));
    for pos in 0..t {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            table[[pos, 2 * i]] = F::from_f64(rate.sin());
            table[[pos, 2 * i + 1]] = F::from_f64(rate.cos());
        }
    }
    Ok(table)
}

/// Lift an f32 host array into the model's scalar type.
pub fn to_real<F: Real>(a: &Array2<f32>) -> Array2<F> {
    a.mapv(|v| F::from_f64(v as f64))
}

/// Two conv(3)+LN+ReLU layers, then the position table, then re-masking.
pub struct VideoProjection {
    pub conv1: Conv1d3,
    pub ln1: LayerNorm,
    pub conv2: Conv1d3,
    pub ln2: LayerNorm,
}

impl VideoProjection {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_model: usize,
    ) -> Self {
        // three taps share the fan-in
        let std1 = (2.0 / (3 * d_in) as f64).sqrt();
        let std2 = (2.0 / (3 * d_model) as f64).sqrt();
        VideoProjection {
            conv1: Conv1d3::new(ps, rng, &format!("{name}.conv1"), d_in, d_model, std1, 0.0),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model),
            conv2: Conv1d3::new(ps, rng, &format!("{name}.conv2"), d_model, d_model, std2, 0.0),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model),
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        x: Val,
        valid: &Arc<Vec<bool>>,
    ) -> Result<Embedded> {
        let (t, _) = tape.shape(x);
        let h = self.conv1.forward(tape, bind, ps, x, valid);
        let h = self.ln1.forward(tape, bind, ps, h);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, bind, ps, h, valid);
        let h = self.ln2.forward(tape, bind, ps, h);
        let h = tape.relu(h);
        let (_, dm) = tape.shape(h);
        let pos = tape.constant(sinusoidal_positions::<F>(t, dm)?);
        let h = tape.add(h, pos);
        let h = tape.row_mask(h, Arc::clone(valid));
        Ok(Embedded {
            x: h,
            valid: Arc::clone(valid),
        })
    }
}

/// Two position-wise linear+LN+ReLU layers; no position embedding.
pub struct TextProjection {
    pub lin1: Linear,
    pub ln1: LayerNorm,
    pub lin2: Linear,
    pub ln2: LayerNorm,
}

impl TextProjection {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_model: usize,
    ) -> Self {
        TextProjection {
            lin1: Linear::new(ps, rng, &format!("{name}.lin1"), d_in, d_model, (2.0 / d_in as f64).sqrt()),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model),
            lin2: Linear::new(ps, rng, &format!("{name}.lin2"), d_model, d_model, (2.0 / d_model as f64).sqrt()),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model),
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        x: Val,
        valid: &Arc<Vec<bool>>,
    ) -> Embedded {
        let h = self.lin1.forward(tape, bind, ps, x);
        let h = self.ln1.forward(tape, bind, ps, h);
        let h = tape.relu(h);
        let h = self.lin2.forward(tape, bind, ps, h);
        let h = self.ln2.forward(tape, bind, ps, h);
        let h = tape.relu(h);
        let h = tape.row_mask(h, Arc::clone(valid));
        Embedded {
            x: h,
            valid: Arc::clone(valid),
        }
    }
}

/// Windowed local self-attention: position `i` attends to valid `j` with
/// `|i - j| <= (window-1)/2`.
pub fn local_self_attention<F: Real>(
    tape: &mut Tape<F>,
    bind: &mut TapeBinding,
    ps: &ParamSet<F>,
    mha: &MultiHeadAttention,
    x: &Embedded,
    window: usize,
) -> Val {
    let (t, _) = tape.shape(x.x);
    let mask = Arc::new(local_attention_mask(t, window, &x.valid));
    mha.forward(tape, bind, ps, x.x, x.x, &mask, &x.valid)
}

/// Cross-attention with queries from `x` and keys/values from `kv`.
pub fn cross_attention<F: Real>(
    tape: &mut Tape<F>,
    bind: &mut TapeBinding,
    ps: &ParamSet<F>,
    mha: &MultiHeadAttention,
    x: &Embedded,
    kv: &Embedded,
) -> Result<Val> {
    if !kv.valid.iter().any(|v| *v) {
        return Err(Error::Validation(
            "cross-attention needs at least one valid key token".into(),
        ));
    }
    let (tq, _) = tape.shape(x.x);
    let mask = Arc::new(cross_attention_mask(tq, &x.valid, &kv.valid));
    Ok(mha.forward(tape, bind, ps, x.x, kv.x, &mask, &x.valid))
}

/// Vanilla pre-norm transformer block: full self-attention + FFN.
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        EncoderBlock {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), cfg.d_model),
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), cfg.d_model, cfg.n_heads),
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), cfg.d_model),
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_expansion),
        }
    }

    fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        x: &Embedded,
        drop: &mut DropoutCtx,
    ) -> Embedded {
        let (t, _) = tape.shape(x.x);
        let mask = Arc::new(cross_attention_mask(t, &x.valid, &x.valid));
        let h = self.ln_attn.forward(tape, bind, ps, x.x);
        let h = Embedded { x: h, valid: Arc::clone(&x.valid) };
        let a = self.attn.forward(tape, bind, ps, h.x, h.x, &mask, &x.valid);
        let a = drop.apply(tape, a);
        let x1 = tape.add(x.x, a);
        let f = self.ln_ffn.forward(tape, bind, ps, x1);
        let f = self.ffn.forward(tape, bind, ps, f);
        let f = drop.apply(tape, f);
        let x2 = tape.add(x1, f);
        let x2 = tape.row_mask(x2, Arc::clone(&x.valid));
        Embedded { x: x2, valid: Arc::clone(&x.valid) }
    }
}

/// Stack of vanilla blocks with a closing layer norm.
pub struct TextEncoder {
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNorm,
}

impl TextEncoder {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let blocks = (0..cfg.n_text_blocks)
            .map(|i| EncoderBlock::new(ps, rng, &format!("{name}.b{i}"), cfg))
            .collect();
        TextEncoder {
            blocks,
            final_ln: LayerNorm::new(ps, &format!("{name}.final_ln"), cfg.d_model),
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        t_in: &Embedded,
        drop: &mut DropoutCtx,
    ) -> Embedded {
        let mut cur = t_in.clone();
        for block in &self.blocks {
            cur = block.forward(tape, bind, ps, &cur, drop);
        }
        let y = self.final_ln.forward(tape, bind, ps, cur.x);
        let y = tape.row_mask(y, Arc::clone(&cur.valid));
        Embedded { x: y, valid: cur.valid }
    }
}

/// Video block: local MHA, cross-attention into text, FFN, in that order,
/// each with a pre-norm residual.
pub struct VideoBlock {
    pub ln_local: LayerNorm,
    pub local: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl VideoBlock {
    fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        VideoBlock {
            ln_local: LayerNorm::new(ps, &format!("{name}.ln_local"), cfg.d_model),
            local: MultiHeadAttention::new(ps, rng, &format!("{name}.local"), cfg.d_model, cfg.n_heads),
            ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), cfg.d_model),
            cross: MultiHeadAttention::new(ps, rng, &format!("{name}.cross"), cfg.d_model, cfg.n_heads),
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), cfg.d_model),
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_expansion),
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        v: &Embedded,
        text: &Embedded,
        window: usize,
        drop: &mut DropoutCtx,
    ) -> Result<Embedded> {
        let h = self.ln_local.forward(tape, bind, ps, v.x);
        let h = Embedded { x: h, valid: Arc::clone(&v.valid) };
        let a = local_self_attention(tape, bind, ps, &self.local, &h, window);
        let a = drop.apply(tape, a);
        let x1 = tape.add(v.x, a);

        let h = self.ln_cross.forward(tape, bind, ps, x1);
        let h = Embedded { x: h, valid: Arc::clone(&v.valid) };
        let c = cross_attention(tape, bind, ps, &self.cross, &h, text)?;
        let c = drop.apply(tape, c);
        let x2 = tape.add(x1, c);

        let f = self.ln_ffn.forward(tape, bind, ps, x2);
        let f = self.ffn.forward(tape, bind, ps, f);
        let f = drop.apply(tape, f);
        let x3 = tape.add(x2, f);
        let x3 = tape.row_mask(x3, Arc::clone(&v.valid));
        Ok(Embedded { x: x3, valid: Arc::clone(&v.valid) })
    }
}

/// The early-fusion video encoder stack; output is the text-aware video
/// feature sequence.
pub struct VideoEncoder {
    pub blocks: Vec<VideoBlock>,
}

impl VideoEncoder {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        VideoEncoder {
            blocks: (0..cfg.n_video_blocks)
                .map(|i| VideoBlock::new(ps, rng, &format!("{name}.b{i}"), cfg))
                .collect(),
        }
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        v: &Embedded,
        text: &Embedded,
        window: usize,
        drop: &mut DropoutCtx,
    ) -> Result<Embedded> {
        let mut cur = v.clone();
        for block in &self.blocks {
            cur = block.forward(tape, bind, ps, &cur, text, window, drop)?;
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn full(t: usize) -> Arc<Vec<bool>> {
        Arc::new(vec![true; t])
    }

    fn padded(t_valid: usize, t_total: usize) -> Arc<Vec<bool>> {
        let mut m = vec![true; t_valid];
        m.extend(std::iter::repeat(false).take(t_total - t_valid));
        Arc::new(m)
    }

    fn rand_array(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sinusoid_row_zero_alternates() {
        let table: Array2<f64> = sinusoidal_positions(4, 6).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(table[[0, 2 * i]], 0.0);
            assert_abs_diff_eq!(table[[0, 2 * i + 1]], 1.0);
        }
        assert!(table.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sinusoid_matches_elementwise_oracle() {
        let (t, d) = (16, 8);
        let table: Array2<f64> = sinusoidal_positions(t, d).unwrap();
        for pos in 0..t {
            for i in 0..d / 2 {
                let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
                assert_abs_diff_eq!(table[[pos, 2 * i]], angle.sin(), epsilon = 1e-15);
                assert_abs_diff_eq!(table[[pos, 2 * i + 1]], angle.cos(), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn sinusoid_rejects_odd_width() {
        assert!(sinusoidal_positions::<f64>(4, 7).is_err());
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            window: 5,
            n_text_blocks: 2,
            n_video_blocks: 2,
            n_pyramid_blocks: 3,
            ffn_expansion: 2,
            dropout: 0.0,
            variant: Variant::Base,
            d_video_in: 6,
            d_text_in: 4,
        }
    }

    #[test]
    fn video_projection_zero_input_gives_position_table() {
        let cfg = tiny_cfg();
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = VideoProjection::new(&mut ps, &mut rng, "vp", cfg.d_video_in, cfg.d_model);
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(&ps);
        let x = tape.constant(Array2::zeros((10, cfg.d_video_in)));
        let out = proj
            .forward(&mut tape, &mut bind, &ps, x, &full(10))
            .unwrap();
        let table: Array2<f64> = sinusoidal_positions(10, cfg.d_model).unwrap();
        let got = tape.value(out.x);
        for i in 0..10 {
            for j in 0..cfg.d_model {
                assert_abs_diff_eq!(got[[i, j]], table[[i, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn video_projection_padding_invariance() {
        let cfg = tiny_cfg();
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let proj = VideoProjection::new(&mut ps, &mut rng, "vp", cfg.d_video_in, cfg.d_model);
        let mut data_rng = ChaCha8Rng::seed_from_u64(5);
        let data = rand_array(&mut data_rng, 64, cfg.d_video_in);

        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(&ps);
        let x = tape.constant(data.clone());
        let out = proj.forward(&mut tape, &mut bind, &ps, x, &full(64)).unwrap();
        let base = tape.value(out.x).clone();

        let mut padded_data = Array2::zeros((72, cfg.d_video_in));
        padded_data.slice_mut(ndarray::s![..64, ..]).assign(&data);
        // garbage in the padding must not leak
        padded_data.slice_mut(ndarray::s![64.., ..]).fill(7.5);
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(&ps);
        let x = tape.constant(padded_data);
        let out = proj
            .forward(&mut tape, &mut bind, &ps, x, &padded(64, 72))
            .unwrap();
        let got = tape.value(out.x);
        for i in 0..64 {
            for j in 0..cfg.d_model {
                assert_abs_diff_eq!(got[[i, j]], base[[i, j]], epsilon = 1e-5);
            }
        }
        for i in 64..72 {
            assert_eq!(got.row(i).sum(), 0.0);
        }
    }

    #[test]
    fn text_projection_is_positionwise() {
        let cfg = tiny_cfg();
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let proj = TextProjection::new(&mut ps, &mut rng, "tp", cfg.d_text_in, cfg.d_model);
        let mut data_rng = ChaCha8Rng::seed_from_u64(7);
        let data = rand_array(&mut data_rng, 12, cfg.d_text_in);

        let run = |input: &Array2<f64>| {
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new(&ps);
            let x = tape.constant(input.clone());
            let out = proj.forward(&mut tape, &mut bind, &ps, x, &full(input.nrows()));
            tape.value(out.x).clone()
        };
        let base = run(&data);
        assert_eq!(base.dim(), (12, cfg.d_model));

        // permuting rows permutes outputs
        let mut permuted = data.clone();
        let tmp = permuted.row(0).to_owned();
        permuted.row_mut(0).assign(&data.row(5));
        permuted.row_mut(5).assign(&tmp);
        let out_p = run(&permuted);
        for j in 0..cfg.d_model {
            assert_abs_diff_eq!(out_p[[0, j]], base[[5, j]], epsilon = 1e-12);
            assert_abs_diff_eq!(out_p[[5, j]], base[[0, j]], epsilon = 1e-12);
        }

        // a single token equals the same token inside a longer sequence
        let single = data.slice(ndarray::s![3..4, ..]).to_owned();
        let out_s = run(&single);
        for j in 0..cfg.d_model {
            assert_abs_diff_eq!(out_s[[0, j]], base[[3, j]], epsilon = 1e-12);
        }
    }

    fn mha_fixture(d: usize, heads: usize, seed: u64) -> (ParamSet<f64>, MultiHeadAttention) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mha = MultiHeadAttention::new(&mut ps, &mut rng, "attn", d, heads);
        (ps, mha)
    }

    #[test]
    fn local_attention_singleton_is_value_path() {
        let (ps, mha) = mha_fixture(8, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = rand_array(&mut rng, 1, 8);
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(&ps);
        let x = tape.constant(x0.clone());
        let e = Embedded { x, valid: full(1) };
        let y = local_self_attention(&mut tape, &mut bind, &ps, &mha, &e, 5);
        // softmax over one key is 1: out = Wo (Wv x + bv) + bo
        let wv = ps.value(mha.v.w).as_ref();
        let bv = ps.value(mha.v.b).as_ref();
        let wo = ps.value(mha.out.w).as_ref();
        let bo = ps.value(mha.out.b).as_ref();
        let want = (x0.dot(wv) + bv).dot(wo) + bo;
        let got = tape.value(y);
        for j in 0..8 {
            assert_abs_diff_eq!(got[[0, j]], want[[0, j]], epsilon = 1e-12);
        }
    }

    /// Dense attention written directly against the parameter arrays.
    fn dense_attention_oracle(
        ps: &ParamSet<f64>,
        mha: &MultiHeadAttention,
        x: &Array2<f64>,
        n_heads: usize,
    ) -> Array2<f64> {
        let q = x.dot(ps.value(mha.q.w).as_ref()) + ps.value(mha.q.b).as_ref();
        let k = x.dot(ps.value(mha.k.w).as_ref()) + ps.value(mha.k.b).as_ref();
        let v = x.dot(ps.value(mha.v.w).as_ref()) + ps.value(mha.v.b).as_ref();
        let (t, d) = x.dim();
        let dh = d / n_heads;
        let mut ctx = Array2::zeros((t, d));
        for h in 0..n_heads {
            let sl = ndarray::s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(sl).to_owned();
            let kh = k.slice(sl).to_owned();
            let vh = v.slice(sl).to_owned();
            let mut scores = qh.dot(&kh.t()) / (dh as f64).sqrt();
            for mut row in scores.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|s| (s - m).exp());
                let z = row.sum();
                row.mapv_inplace(|s| s / z);
            }
            ctx.slice_mut(sl).assign(&scores.dot(&vh));
        }
        ctx.dot(ps.value(mha.out.w).as_ref()) + ps.value(mha.out.b).as_ref()
    }

    #[test]
    fn wide_window_matches_dense_oracle() {
        let (ps, mha) = mha_fixture(16, 4, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for &t in &[1usize, 3, 9, 17] {
            let x0 = rand_array(&mut rng, t, 16);
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new(&ps);
            let x = tape.constant(x0.clone());
            let e = Embedded { x, valid: full(t) };
            let y = local_self_attention(&mut tape, &mut bind, &ps, &mha, &e, 2 * t - 1);
            let got = tape.value(y);
            let want = dense_attention_oracle(&ps, &mha, &x0, 4);
            for i in 0..t {
                for j in 0..16 {
                    assert_abs_diff_eq!(got[[i, j]], want[[i, j]], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn local_attention_locality_radius() {
        let (ps, mha) = mha_fixture(8, 2, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x0 = rand_array(&mut rng, 20, 8);
        let window = 5; // radius 2
        let run = |input: &Array2<f64>| {
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new(&ps);
            let x = tape.constant(input.clone());
            let e = Embedded { x, valid: full(20) };
            let y = local_self_attention(&mut tape, &mut bind, &ps, &mha, &e, window);
            tape.value(y).clone()
        };
        let base = run(&x0);
        let mut bumped = x0.clone();
        bumped[[10, 3]] += 1.0;
        let after = run(&bumped);
        for i in 0..20 {
            let delta: f64 = (&after.row(i) - &base.row(i)).mapv(f64::abs).sum();
            if i.abs_diff(10) <= 2 {
                assert!(delta > 0.0, "row {i} inside radius should move");
            } else {
                assert_abs_diff_eq!(delta, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_single_key_and_duplicates() {
        let (ps, mha) = mha_fixture(8, 2, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xq = rand_array(&mut rng, 6, 8);
        let kv1 = rand_array(&mut rng, 1, 8);

        let run = |kv: &Array2<f64>| {
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new(&ps);
            let x = tape.constant(xq.clone());
            let k = tape.constant(kv.clone());
            let e = Embedded { x, valid: full(6) };
            let ekv = Embedded { x: k, valid: full(kv.nrows()) };
            let y = cross_attention(&mut tape, &mut bind, &ps, &mha, &e, &ekv).unwrap();
            tape.value(y).clone()
        };

        // single key: every row is the value path of kv0
        let got = run(&kv1);
        let wv = ps.value(mha.v.w);
        let bv = ps.value(mha.v.b);
        let wo = ps.value(mha.out.w);
        let bo = ps.value(mha.out.b);
        let want = (kv1.dot(wv.as_ref()) + bv.as_ref()).dot(wo.as_ref()) + bo.as_ref();
        for i in 0..6 {
            for j in 0..8 {
                assert_abs_diff_eq!(got[[i, j]], want[[0, j]], epsilon = 1e-12);
            }
        }
        assert_eq!(got.dim(), (6, 8));

        // duplicating the token (two identical keys) splits the softmax mass
        // in half without changing the output
        let mut kv2 = Array2::zeros((2, 8));
        kv2.row_mut(0).assign(&kv1.row(0));
        kv2.row_mut(1).assign(&kv1.row(0));
        let dup = run(&kv2);
        for i in 0..6 {
            for j in 0..8 {
                assert_abs_diff_eq!(dup[[i, j]], got[[i, j]], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn cross_attention_rejects_empty_kv() {
        let (ps, mha) = mha_fixture(8, 2, 51);
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(&ps);
        let x = tape.constant(Array2::zeros((2, 8)));
        let k = tape.constant(Array2::zeros((2, 8)));
        let e = Embedded { x, valid: full(2) };
        let ekv = Embedded { x: k, valid: Arc::new(vec![false, false]) };
        assert!(cross_attention(&mut tape, &mut bind, &ps, &mha, &e, &ekv).is_err());
    }

    fn encoder_fixture(
        cfg: &ModelConfig,
        seed: u64,
    ) -> (ParamSet<f64>, TextProjection, TextEncoder, VideoProjection, VideoEncoder) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tp = TextProjection::new(&mut ps, &mut rng, "text_proj", cfg.d_text_in, cfg.d_model);
        let te = TextEncoder::new(&mut ps, &mut rng, "text_enc", cfg);
        let vp = VideoProjection::new(&mut ps, &mut rng, "video_proj", cfg.d_video_in, cfg.d_model);
        let ve = VideoEncoder::new(&mut ps, &mut rng, "video_enc", cfg);
        (ps, tp, te, vp, ve)
    }

    #[test]
    fn text_encoder_shape_mask_and_degenerate_length() {
        let cfg = tiny_cfg();
        let (ps, tp, te, _, _) = encoder_fixture(&cfg, 61);
        for l in [1usize, 7] {
            let mut rng = ChaCha8Rng::seed_from_u64(62);
            let data = rand_array(&mut rng, l, cfg.d_text_in);
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new(&ps);
            let x = tape.constant(data);
            let proj = tp.forward(&mut tape, &mut bind, &ps, x, &full(l));
            let out = te.forward(&mut tape, &mut bind, &ps, &proj, &mut DropoutCtx::eval());
            let y = tape.value(out.x);
            assert_eq!(y.dim(), (l, cfg.d_model));
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn text_encoder_padding_invariance() {
        let cfg = tiny_cfg();
        let (ps, tp, te, _, _) = encoder_fixture(&cfg, 63);
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let data = rand_array(&mut rng, 6, cfg.d_text_in);

        let run = |input: &Array2<f64>, valid: Arc<Vec<bool>>| {
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new(&ps);
            let x = tape.constant(input.clone());
            let proj = tp.forward(&mut tape, &mut bind, &ps, x, &valid);
            let out = te.forward(&mut tape, &mut bind, &ps, &proj, &mut DropoutCtx::eval());
            tape.value(out.x).clone()
        };
        let base = run(&data, full(6));
        let mut padded_data = Array2::from_elem((9, cfg.d_text_in), -3.0);
        padded_data.slice_mut(ndarray::s![..6, ..]).assign(&data);
        let got = run(&padded_data, padded(6, 9));
        for i in 0..6 {
            for j in 0..cfg.d_model {
                assert_abs_diff_eq!(got[[i, j]], base[[i, j]], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn video_encoder_zeroed_cross_equals_text_free_run() {
        // with the cross-attention output projections zeroed, the text path
        // contributes zero through each residual
        let cfg = tiny_cfg();
        let (mut ps, tp, te, vp, ve) = encoder_fixture(&cfg, 81);
        for block in &ve.blocks {
            let dim = ps.value(block.cross.out.w).dim();
            ps.set(block.cross.out.w, Array2::zeros(dim));
            let dim = ps.value(block.cross.out.b).dim();
            ps.set(block.cross.out.b, Array2::zeros(dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let vdata = rand_array(&mut rng, 18, cfg.d_video_in);
        let tdata = rand_array(&mut rng, 4, cfg.d_text_in);

        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(&ps);
        let xt = tape.constant(tdata.clone());
        let tenc = {
            let proj = tp.forward(&mut tape, &mut bind, &ps, xt, &full(4));
            te.forward(&mut tape, &mut bind, &ps, &proj, &mut DropoutCtx::eval())
        };
        let xv = tape.constant(vdata.clone());
        let vproj = vp.forward(&mut tape, &mut bind, &ps, xv, &full(18)).unwrap();
        let with_text = ve
            .forward(&mut tape, &mut bind, &ps, &vproj, &tenc, cfg.window, &mut DropoutCtx::eval())
            .unwrap();
        let with_text = tape.value(with_text.x).clone();

        // text-free reference: the same blocks wired without the cross layer
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(&ps);
        let xv = tape.constant(vdata.clone());
        let vproj = vp.forward(&mut tape, &mut bind, &ps, xv, &full(18)).unwrap();
        let mut cur = vproj;
        for block in &ve.blocks {
            let h = block.ln_local.forward(&mut tape, &mut bind, &ps, cur.x);
            let h = Embedded { x: h, valid: Arc::clone(&cur.valid) };
            let a = local_self_attention(&mut tape, &mut bind, &ps, &block.local, &h, cfg.window);
            let x1 = tape.add(cur.x, a);
            let f = block.ln_ffn.forward(&mut tape, &mut bind, &ps, x1);
            let f = block.ffn.forward(&mut tape, &mut bind, &ps, f);
            let x2 = tape.add(x1, f);
            let x2 = tape.row_mask(x2, Arc::clone(&cur.valid));
            cur = Embedded { x: x2, valid: Arc::clone(&cur.valid) };
        }
        let text_free = tape.value(cur.x).clone();

        for (a, b) in with_text.iter().zip(text_free.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn video_encoder_fusion_is_live_and_masked() {
        let cfg = tiny_cfg();
        let (ps, tp, te, vp, ve) = encoder_fixture(&cfg, 71);
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let vdata = rand_array(&mut rng, 24, cfg.d_video_in);
        let t1 = rand_array(&mut rng, 5, cfg.d_text_in);
        let t2 = rand_array(&mut rng, 5, cfg.d_text_in);

        let run = |text: &Array2<f64>| {
            let mut tape = Tape::new();
            let mut bind = TapeBinding::new(&ps);
            let xt = tape.constant(text.clone());
            let tproj = tp.forward(&mut tape, &mut bind, &ps, xt, &full(text.nrows()));
            let tenc = te.forward(&mut tape, &mut bind, &ps, &tproj, &mut DropoutCtx::eval());
            let xv = tape.constant(vdata.clone());
            let vproj = vp.forward(&mut tape, &mut bind, &ps, xv, &full(24)).unwrap();
            let venc = ve
                .forward(&mut tape, &mut bind, &ps, &vproj, &tenc, cfg.window, &mut DropoutCtx::eval())
                .unwrap();
            tape.value(venc.x).clone()
        };
        let y1 = run(&t1);
        assert_eq!(y1.dim(), (24, cfg.d_model));
        let y2 = run(&t2);
        let max_diff = (&y1 - &y2).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(max_diff > 0.0, "early fusion must react to the query");
    }
}
