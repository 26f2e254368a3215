//! The assembled grounding model: projections, text encoder, early-fusion
//! video encoder, multi-scale pyramid, and the shared prediction heads.
//!
//! A model owns its [`ParamSet`]; forward passes record onto a caller-owned
//! tape, so evaluation and per-sample gradients share one code path.

use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape};
use crate::data::{FeatureSequence, QueryTokens};
use crate::decode::{decode_predictions, soft_nms, Candidate, DecodeConfig};
use crate::encoder::{
    to_real, ModelConfig, TextEncoder, TextProjection, VideoEncoder, VideoProjection,
};
use crate::error::{Error, Result};
use crate::heads::{PredictionHeads, TapeHeadOutputs};
use crate::nn::{DropoutCtx, ParamSet, TapeBinding};
use crate::pyramid::MultiScaleEncoder;

pub struct GroundingModel<F: Real> {
    pub cfg: ModelConfig,
    pub params: ParamSet<F>,
    pub text_proj: TextProjection,
    pub text_enc: TextEncoder,
    pub video_proj: VideoProjection,
    pub video_enc: VideoEncoder,
    pub pyramid_enc: MultiScaleEncoder,
    pub heads: PredictionHeads,
}

/// Parameters with this prefix belong to the prediction heads (re-initialized
/// when fine-tuning starts from a pretraining checkpoint).
pub const HEAD_PREFIX: &str = "head.";

impl<F: Real> GroundingModel<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text_proj = TextProjection::new(&mut ps, &mut rng, "text_proj", cfg.d_text_in, cfg.d_model);
        let text_enc = TextEncoder::new(&mut ps, &mut rng, "text_enc", &cfg);
        let video_proj =
            VideoProjection::new(&mut ps, &mut rng, "video_proj", cfg.d_video_in, cfg.d_model);
        let video_enc = VideoEncoder::new(&mut ps, &mut rng, "video_enc", &cfg);
        let pyramid_enc = MultiScaleEncoder::new(&mut ps, &mut rng, "pyramid", &cfg);
        let heads = PredictionHeads::new(&mut ps, &mut rng, &cfg);
        Ok(GroundingModel {
            cfg,
            params: ps,
            text_proj,
            text_enc,
            video_proj,
            video_enc,
            pyramid_enc,
            heads,
        })
    }

    /// Full forward pass for one (video, query) pair. Inputs are host f32
    /// rasters plus prefix-valid masks.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        video: &Array2<f32>,
        video_valid: &[bool],
        tokens: &Array2<f32>,
        tokens_valid: &[bool],
        drop: &mut DropoutCtx,
    ) -> Result<(TapeHeadOutputs, TapeBinding)> {
        if video.ncols() != self.cfg.d_video_in {
            return Err(Error::Config(format!(
                "video feature width {} does not match configured D_video_in {}",
                video.ncols(),
                self.cfg.d_video_in
            )));
        }
        if tokens.ncols() != self.cfg.d_text_in {
            return Err(Error::Config(format!(
                "token feature width {} does not match configured D_text_in {}",
                tokens.ncols(),
                self.cfg.d_text_in
            )));
        }
        if !tokens_valid.iter().any(|v| *v) {
            return Err(Error::Validation("query has no valid tokens".into()));
        }
        let mut bind = TapeBinding::new(&self.params);
        let ps = &self.params;

        let t_in = tape.constant(to_real::<F>(tokens));
        let t_valid = Arc::new(tokens_valid.to_vec());
        let t_proj = self.text_proj.forward(tape, &mut bind, ps, t_in, &t_valid);
        let t_enc = self.text_enc.forward(tape, &mut bind, ps, &t_proj, drop);

        let v_in = tape.constant(to_real::<F>(video));
        let v_valid = Arc::new(video_valid.to_vec());
        let v_proj = self.video_proj.forward(tape, &mut bind, ps, v_in, &v_valid)?;
        let v_enc = self
            .video_enc
            .forward(tape, &mut bind, ps, &v_proj, &t_enc, self.cfg.window, drop)?;

        let pyramid = self
            .pyramid_enc
            .forward(tape, &mut bind, ps, &v_enc, &t_enc, &self.cfg, drop)?;
        let outputs = self.heads.forward(tape, &mut bind, ps, &pyramid);
        Ok((outputs, bind))
    }

    /// Decode ranked, NMS-filtered predictions for one (video, query) pair.
    pub fn predict(
        &self,
        video: &FeatureSequence,
        query: &QueryTokens,
        dcfg: &DecodeConfig,
    ) -> Result<Vec<Candidate>> {
        let mut tape = Tape::new();
        let (outputs, _) = self.forward(
            &mut tape,
            &video.data,
            &video.valid_mask,
            &query.data,
            &query.valid_mask,
            &mut DropoutCtx::eval(),
        )?;
        let plain = outputs.extract(&tape);
        let duration = video.num_valid() as f64 * video.snippet_duration_sec;
        let cands = decode_predictions(&plain, video.snippet_duration_sec, duration, dcfg)?;
        soft_nms(&cands, dcfg)
    }

    /// Copy every parameter value from `other` (same architecture), heads
    /// included.
    pub fn copy_params_from(&mut self, other: &ParamSet<F>) -> Result<()> {
        self.copy_params_filtered(other, |_| true)
    }

    /// Copy every non-head parameter from `other`; the heads keep their
    /// fresh initialization.
    pub fn copy_encoder_params_from(&mut self, other: &ParamSet<F>) -> Result<()> {
        self.copy_params_filtered(other, |name| !name.starts_with(HEAD_PREFIX))
    }

    fn copy_params_filtered(
        &mut self,
        other: &ParamSet<F>,
        keep: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for id in self.params.ids() {
            let name = self.params.name(id).to_string();
            if !keep(&name) {
                continue;
            }
            let src = other
                .id(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
            if other.value(src).dim() != self.params.value(id).dim() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    other.value(src).dim(),
                    self.params.value(id).dim()
                )));
            }
            let v = other.value(src).as_ref().clone();
            self.params.set(id, v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Variant;
    use crate::pyramid::level_lengths;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            window: 5,
            n_text_blocks: 2,
            n_video_blocks: 2,
            n_pyramid_blocks: 6,
            ffn_expansion: 2,
            dropout: 0.0,
            variant: Variant::Base,
            d_video_in: 6,
            d_text_in: 4,
        }
    }

    fn rand_input(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array2<f32> {
        Array2::from_shape_fn((t, d), |_| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn forward_emits_seven_finite_levels() {
        let cfg = tiny_cfg();
        let model: GroundingModel<f64> = GroundingModel::new(cfg.clone(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let video = rand_input(&mut rng, 37, cfg.d_video_in);
        let tokens = rand_input(&mut rng, 5, cfg.d_text_in);
        let mut tape = Tape::new();
        let (out, _) = model
            .forward(
                &mut tape,
                &video,
                &vec![true; 37],
                &tokens,
                &vec![true; 5],
                &mut DropoutCtx::eval(),
            )
            .unwrap();
        let plain = out.extract(&tape);
        let lengths: Vec<usize> = plain.levels.iter().map(|l| l.logits.len()).collect();
        assert_eq!(lengths, level_lengths(37, 7));
        for lvl in &plain.levels {
            assert!(lvl.logits.iter().all(|v| v.is_finite()));
            assert!(lvl.distances.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn same_seed_same_params_and_outputs() {
        let cfg = tiny_cfg();
        let m1: GroundingModel<f32> = GroundingModel::new(cfg.clone(), 7).unwrap();
        let m2: GroundingModel<f32> = GroundingModel::new(cfg.clone(), 7).unwrap();
        for (id1, id2) in m1.params.ids().zip(m2.params.ids()) {
            assert_eq!(m1.params.value(id1), m2.params.value(id2));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let video = rand_input(&mut rng, 20, cfg.d_video_in);
        let tokens = rand_input(&mut rng, 3, cfg.d_text_in);
        let run = |m: &GroundingModel<f32>| {
            let mut tape = Tape::new();
            let (out, _) = m
                .forward(
                    &mut tape,
                    &video,
                    &vec![true; 20],
                    &tokens,
                    &vec![true; 3],
                    &mut DropoutCtx::eval(),
                )
                .unwrap();
            out.extract(&tape)
        };
        let o1 = run(&m1);
        let o2 = run(&m2);
        for (a, b) in o1.levels.iter().zip(&o2.levels) {
            assert_eq!(a.logits, b.logits);
            assert_eq!(a.distances, b.distances);
        }
    }

    #[test]
    fn full_forward_mask_invariance() {
        let cfg = tiny_cfg();
        let model: GroundingModel<f64> = GroundingModel::new(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 33;
        let video = rand_input(&mut rng, t, cfg.d_video_in);
        let tokens = rand_input(&mut rng, 4, cfg.d_text_in);

        let run = |v: &Array2<f32>, vm: &[bool], q: &Array2<f32>, qm: &[bool]| {
            let mut tape = Tape::new();
            let (out, _) = model
                .forward(&mut tape, v, vm, q, qm, &mut DropoutCtx::eval())
                .unwrap();
            out.extract(&tape)
        };
        let base = run(&video, &vec![true; t], &tokens, &vec![true; 4]);

        // pad both inputs with garbage rows marked invalid
        let mut vp = Array2::from_elem((t + 9, cfg.d_video_in), 3.25f32);
        vp.slice_mut(ndarray::s![..t, ..]).assign(&video);
        let mut vm = vec![true; t];
        vm.extend([false; 9]);
        let mut qp = Array2::from_elem((6, cfg.d_text_in), -2.0f32);
        qp.slice_mut(ndarray::s![..4, ..]).assign(&tokens);
        let qm = vec![true, true, true, true, false, false];
        let padded = run(&vp, &vm, &qp, &qm);

        for (lb, lp) in base.levels.iter().zip(&padded.levels) {
            for i in 0..lb.logits.len() {
                if !lb.valid[i] {
                    continue;
                }
                assert_abs_diff_eq!(lb.logits[i], lp.logits[i], epsilon = 1e-5);
                assert_abs_diff_eq!(
                    lb.distances[[i, 0]],
                    lp.distances[[i, 0]],
                    epsilon = 1e-5
                );
                assert_abs_diff_eq!(
                    lb.distances[[i, 1]],
                    lp.distances[[i, 1]],
                    epsilon = 1e-5
                );
            }
        }
    }

    #[test]
    fn star_with_zeroed_cross_matches_base_model() {
        let base_cfg = tiny_cfg();
        let star_cfg = ModelConfig {
            variant: Variant::Star,
            ..base_cfg.clone()
        };
        let base: GroundingModel<f64> = GroundingModel::new(base_cfg.clone(), 11).unwrap();
        let mut star: GroundingModel<f64> = GroundingModel::new(star_cfg, 12).unwrap();

        for (name, value) in base.params.iter() {
            let id = star.params.id(name).expect("shared parameter");
            star.params.set(id, value.as_ref().clone());
        }
        for block in &star.pyramid_enc.blocks {
            let (_, cross) = block.cross.as_ref().unwrap();
            let dim = star.params.value(cross.out.w).dim();
            star.params.set(cross.out.w, Array2::zeros(dim));
            let dim = star.params.value(cross.out.b).dim();
            star.params.set(cross.out.b, Array2::zeros(dim));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let video = rand_input(&mut rng, 29, base_cfg.d_video_in);
        let tokens = rand_input(&mut rng, 4, base_cfg.d_text_in);
        let run = |m: &GroundingModel<f64>| {
            let mut tape = Tape::new();
            let (out, _) = m
                .forward(
                    &mut tape,
                    &video,
                    &vec![true; 29],
                    &tokens,
                    &vec![true; 4],
                    &mut DropoutCtx::eval(),
                )
                .unwrap();
            out.extract(&tape)
        };
        let ob = run(&base);
        let os = run(&star);
        for (a, b) in ob.levels.iter().zip(&os.levels) {
            for i in 0..a.logits.len() {
                assert_abs_diff_eq!(a.logits[i], b.logits[i], epsilon = 1e-6);
            }
            for (x, y) in a.distances.iter().zip(b.distances.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let cfg = tiny_cfg();
        let model: GroundingModel<f64> = GroundingModel::new(cfg.clone(), 0).unwrap();
        let mut tape = Tape::new();
        let bad_video = Array2::zeros((8, cfg.d_video_in + 1));
        let tokens = Array2::zeros((2, cfg.d_text_in));
        let err = model
            .forward(
                &mut tape,
                &bad_video,
                &vec![true; 8],
                &tokens,
                &vec![true; 2],
                &mut DropoutCtx::eval(),
            )
            .err()
            .expect("width mismatch must fail");
        assert!(matches!(err, Error::Config(_)));
    }
}
