//! Multi-scale transformer encoder: 6 blocks, each halving the temporal
//! length with stride-2 masked max-pooling, yielding a 7-level text-aware
//! feature pyramid (the input plus every block output). Level `l` has
//! stride `2^l` and length `ceil(T / 2^l)`, never below 1.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape};
use crate::encoder::{cross_attention, local_self_attention, Embedded, ModelConfig, Variant};
use crate::error::Result;
use crate::nn::{DropoutCtx, FeedForward, LayerNorm, MultiHeadAttention, ParamSet, TapeBinding};

/// Text-aware feature pyramid on the tape. `levels[l]` has stride `2^l`.
pub struct Pyramid {
    pub levels: Vec<Embedded>,
}

impl Pyramid {
    pub fn stride(level: usize) -> usize {
        1 << level
    }
}

/// Expected level lengths for a given input length: repeated ceil-halving,
/// saturating at 1.
pub fn level_lengths(t: usize, n_levels: usize) -> Vec<usize> {
    let mut lengths = Vec::with_capacity(n_levels);
    let mut cur = t.max(1);
    for _ in 0..n_levels {
        lengths.push(cur);
        cur = cur.div_ceil(2);
    }
    lengths
}

/// Stride-2 max pool over valid positions; the odd tail pools alone, and a
/// position with no valid source is invalid and zero.
pub fn masked_max_pool<F: Real>(tape: &mut Tape<F>, x: &Embedded, stride: usize) -> Embedded {
    assert_eq!(stride, 2, "pooling stride is fixed at 2");
    let (y, out_valid) = tape.max_pool2(x.x, &x.valid);
    Embedded {
        x: y,
        valid: Arc::new(out_valid),
    }
}

/// One multi-scale block: local MHA at the incoming resolution, stride-2
/// pooling (no residual), an optional cross-modal layer (star variant), FFN.
pub struct MultiScaleBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl MultiScaleBlock {
    fn new<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> Self {
        MultiScaleBlock {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), cfg.d_model),
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), cfg.d_model, cfg.n_heads),
            cross: match cfg.variant {
                Variant::Base => None,
                Variant::Star => Some((
                    LayerNorm::new(ps, &format!("{name}.ln_cross"), cfg.d_model),
                    MultiHeadAttention::new(ps, rng, &format!("{name}.cross"), cfg.d_model, cfg.n_heads),
                )),
            },
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
        text: &Embedded,
        window: usize,
        drop: &mut DropoutCtx,
    ) -> Result<Embedded> {
        let h = self.ln_attn.forward(tape, bind, ps, x.x);
        let h = Embedded { x: h, valid: Arc::clone(&x.valid) };
        let a = local_self_attention(tape, bind, ps, &self.attn, &h, window);
        let a = drop.apply(tape, a);
        let x1 = tape.add(x.x, a);
        let x1 = Embedded { x: x1, valid: Arc::clone(&x.valid) };

        let pooled = masked_max_pool(tape, &x1, 2);

        let x2 = match &self.cross {
            None => pooled,
            Some((ln, cross_attn)) => {
                let h = ln.forward(tape, bind, ps, pooled.x);
                let h = Embedded { x: h, valid: Arc::clone(&pooled.valid) };
                let c = cross_attention(tape, bind, ps, cross_attn, &h, text)?;
                let c = drop.apply(tape, c);
                let y = tape.add(pooled.x, c);
                Embedded { x: y, valid: pooled.valid }
            }
        };

        let f = self.ln_ffn.forward(tape, bind, ps, x2.x);
        let f = self.ffn.forward(tape, bind, ps, f);
        let f = drop.apply(tape, f);
        let y = tape.add(x2.x, f);
        let y = tape.row_mask(y, Arc::clone(&x2.valid));
        Ok(Embedded { x: y, valid: x2.valid })
    }
}

pub struct MultiScaleEncoder {
    pub blocks: Vec<MultiScaleBlock>,
}

impl MultiScaleEncoder {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> Self {
        MultiScaleEncoder {
            blocks: (0..cfg.n_pyramid_blocks)
                .map(|i| MultiScaleBlock::new(ps, rng, &format!("{name}.b{i}"), cfg))
                .collect(),
        }
    }

    /// Level 0 is the video-encoder output; level `l` is block `l`'s output.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        v: &Embedded,
        text: &Embedded,
        cfg: &ModelConfig,
        drop: &mut DropoutCtx,
    ) -> Result<Pyramid> {
        let mut levels = Vec::with_capacity(self.blocks.len() + 1);
        levels.push(v.clone());
        let mut cur = v.clone();
        for block in &self.blocks {
            cur = block.forward(tape, bind, ps, &cur, text, cfg.window, drop)?;
            levels.push(cur.clone());
        }
        Ok(Pyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn level_lengths_examples() {
        assert_eq!(level_lengths(64, 7), vec![64, 32, 16, 8, 4, 2, 1]);
        assert_eq!(level_lengths(7, 7), vec![7, 4, 2, 1, 1, 1, 1]);
        assert_eq!(level_lengths(1, 7), vec![1; 7]);
    }

    #[test]
    fn pool_brute_force_oracle() {
        // masked pooling equals a per-window max over valid entries, exactly
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1usize..40 {
            let d = 3;
            let data = Array2::from_shape_fn((t, d), |_| rng.gen_range(-5.0f64..5.0));
            let n_valid = rng.gen_range(1..=t);
            let valid: Vec<bool> = (0..t).map(|i| i < n_valid).collect();

            let mut tape = Tape::new();
            let x = tape.constant(data.clone());
            let e = Embedded { x, valid: Arc::new(valid.clone()) };
            let out = masked_max_pool(&mut tape, &e, 2);
            let y = tape.value(out.x);

            for r in 0..t.div_ceil(2) {
                let sources: Vec<usize> =
                    [2 * r, 2 * r + 1].into_iter().filter(|&s| s < t && valid[s]).collect();
                assert_eq!(out.valid[r], !sources.is_empty());
                for j in 0..d {
                    let want = sources
                        .iter()
                        .map(|&s| data[[s, j]])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let want = if sources.is_empty() { 0.0 } else { want };
                    assert_eq!(y[[r, j]], want);
                }
            }
        }
    }

    fn star_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            window: 5,
            n_text_blocks: 1,
            n_video_blocks: 1,
            n_pyramid_blocks: 6,
            ffn_expansion: 2,
            dropout: 0.0,
            variant: Variant::Star,
            d_video_in: 6,
            d_text_in: 4,
        }
    }

    fn pyramid_fixture(
        cfg: &ModelConfig,
        seed: u64,
    ) -> (ParamSet<f64>, MultiScaleEncoder) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = MultiScaleEncoder::new(&mut ps, &mut rng, "pyr", cfg);
        (ps, enc)
    }

    fn run_pyramid(
        ps: &ParamSet<f64>,
        enc: &MultiScaleEncoder,
        cfg: &ModelConfig,
        vdata: &Array2<f64>,
        valid: &[bool],
        tdata: &Array2<f64>,
    ) -> (Vec<Array2<f64>>, Vec<Vec<bool>>) {
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(ps);
        let v = tape.constant(vdata.clone());
        let t = tape.constant(tdata.clone());
        let ve = Embedded { x: v, valid: Arc::new(valid.to_vec()) };
        let te = Embedded { x: t, valid: Arc::new(vec![true; tdata.nrows()]) };
        let pyr = enc
            .forward(&mut tape, &mut bind, ps, &ve, &te, cfg, &mut DropoutCtx::eval())
            .unwrap();
        (
            pyr.levels.iter().map(|l| tape.value(l.x).clone()).collect(),
            pyr.levels.iter().map(|l| l.valid.as_ref().clone()).collect(),
        )
    }

    #[test]
    fn forward_produces_seven_levels_with_halving_lengths() {
        let cfg = ModelConfig { variant: Variant::Base, ..star_cfg() };
        let (ps, enc) = pyramid_fixture(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in [64usize, 7] {
            let vdata = Array2::from_shape_fn((t, cfg.d_model), |_| rng.gen_range(-1.0..1.0));
            let tdata = Array2::from_shape_fn((3, cfg.d_model), |_| rng.gen_range(-1.0..1.0));
            let (levels, _) = run_pyramid(&ps, &enc, &cfg, &vdata, &vec![true; t], &tdata);
            let lengths: Vec<usize> = levels.iter().map(|l| l.nrows()).collect();
            assert_eq!(lengths, level_lengths(t, 7));
        }
    }

    #[test]
    fn star_with_zeroed_cross_matches_base() {
        let base_cfg = ModelConfig { variant: Variant::Base, ..star_cfg() };
        let star_cfg = star_cfg();
        let (base_ps, base_enc) = pyramid_fixture(&base_cfg, 7);
        let (mut star_ps, star_enc) = pyramid_fixture(&star_cfg, 8);

        // align shared parameters, zero the star-only cross output projections
        for (name, value) in base_ps.iter() {
            let id = star_ps.id(name).expect("shared parameter");
            star_ps.set(id, value.as_ref().clone());
        }
        for block in &star_enc.blocks {
            let (_, cross) = block.cross.as_ref().unwrap();
            let (r, c) = star_ps.value(cross.out.w).dim();
            star_ps.set(cross.out.w, Array2::zeros((r, c)));
            let (r, c) = star_ps.value(cross.out.b).dim();
            star_ps.set(cross.out.b, Array2::zeros((r, c)));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = 21;
        let vdata = Array2::from_shape_fn((t, base_cfg.d_model), |_| rng.gen_range(-1.0..1.0));
        let tdata = Array2::from_shape_fn((4, base_cfg.d_model), |_| rng.gen_range(-1.0..1.0));
        let (b_levels, _) = run_pyramid(&base_ps, &base_enc, &base_cfg, &vdata, &vec![true; t], &tdata);
        let (s_levels, _) = run_pyramid(&star_ps, &star_enc, &star_cfg, &vdata, &vec![true; t], &tdata);
        for (bl, sl) in b_levels.iter().zip(&s_levels) {
            for (x, y) in bl.iter().zip(sl.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn mask_law_over_levels(t in 1usize..80, n_valid_frac in 0.05f64..1.0) {
            // level-l position p is valid iff its level-0 preimage
            // [p*2^l, (p+1)*2^l) holds at least one valid position
            let cfg = ModelConfig { variant: Variant::Base, ..star_cfg() };
            let (ps, enc) = pyramid_fixture(&cfg, 11);
            let n_valid = ((t as f64 * n_valid_frac).ceil() as usize).clamp(1, t);
            let valid: Vec<bool> = (0..t).map(|i| i < n_valid).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let vdata = Array2::from_shape_fn((t, cfg.d_model), |_| rng.gen_range(-1.0..1.0));
            let tdata = Array2::from_shape_fn((2, cfg.d_model), |_| rng.gen_range(-1.0..1.0));
            let (_, masks) = run_pyramid(&ps, &enc, &cfg, &vdata, &valid, &tdata);
            for (l, mask) in masks.iter().enumerate() {
                let stride = 1usize << l;
                for (p, &ok) in mask.iter().enumerate() {
                    let lo = p * stride;
                    let hi = ((p + 1) * stride).min(t);
                    let want = (lo..hi).any(|i| i < t && valid[i]);
                    prop_assert_eq!(ok, want, "level {} pos {}", l, p);
                }
            }
        }
    }
}
