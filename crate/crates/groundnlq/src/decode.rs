//! Turning head outputs into ranked temporal predictions: interval
//! reconstruction, score thresholding, soft (Gaussian) or hard NMS, and
//! score-fused model ensembling.
//!
//! All orderings use one deterministic comparator (descending score, ties
//! by earlier start, then lower level, then lower location), so repeated
//! runs produce byte-identical rankings.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid_scalar;
use crate::data::Moment;
use crate::error::{Error, Result};
use crate::heads::HeadOutputs;

/// A decoded moment prediction with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
    pub level: usize,
    pub location: usize,
}

impl Candidate {
    pub fn moment(&self) -> Moment {
        Moment {
            start_sec: self.start_sec,
            end_sec: self.end_sec,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsMode {
    SoftGaussian,
    Hard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub pre_nms_topk: usize,
    pub nms: NmsMode,
    pub soft_sigma: f64,
    pub hard_iou: f64,
    pub keep_topk: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 1e-3,
            pre_nms_topk: 2000,
            nms: NmsMode::SoftGaussian,
            soft_sigma: 0.9,
            hard_iou: 0.5,
            keep_topk: 5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.score_threshold) || self.score_threshold <= 0.0 {
            return Err(Error::Config("score_threshold must be in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_iou) {
            return Err(Error::Config("hard_iou must be in [0, 1]".into()));
        }
        if self.soft_sigma <= 0.0 {
            return Err(Error::Config("soft_sigma must be > 0".into()));
        }
        if self.pre_nms_topk < 1 || self.keep_topk < 1 {
            return Err(Error::Config("topk values must be >= 1".into()));
        }
        Ok(())
    }
}

/// Intersection over union of two intervals, in `[0, 1]`.
pub fn temporal_iou(a: Moment, b: Moment) -> f64 {
    let inter = (a.end_sec.min(b.end_sec) - a.start_sec.max(b.start_sec)).max(0.0);
    let union = (a.end_sec.max(b.end_sec) - a.start_sec.min(b.start_sec)).max(f64::MIN_POSITIVE);
    (inter / union).clamp(0.0, 1.0)
}

/// Deterministic ranking: score descending, ties by earlier start, lower
/// level, lower location.
fn rank(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_sec.total_cmp(&b.start_sec))
        .then(a.level.cmp(&b.level))
        .then(a.location.cmp(&b.location))
}

/// Reconstruct intervals from every above-threshold location of every level.
/// A location `i` at level `l` (stride `s`) sits at snippet coordinate
/// `t = (i+0.5)s` and predicts `[(t - d_start*s) * delta, (t + d_end*s) * delta]`
/// seconds, clamped to the video; candidates that clamp empty are dropped.
/// Returns at most `pre_nms_topk` candidates, best first.
pub fn decode_predictions(
    outputs: &HeadOutputs,
    snippet_duration_sec: f64,
    video_duration_sec: f64,
    cfg: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let mut cands = Vec::new();
    for (level, lvl) in outputs.levels.iter().enumerate() {
        let stride = (1usize << level) as f64;
        for (loc, &logit) in lvl.logits.iter().enumerate() {
            if !lvl.valid[loc] {
                continue;
            }
            let score = sigmoid_scalar(logit);
            if score <= cfg.score_threshold {
                continue;
            }
            let coord = (loc as f64 + 0.5) * stride;
            let start = ((coord - lvl.distances[[loc, 0]] * stride) * snippet_duration_sec)
                .clamp(0.0, video_duration_sec);
            let end = ((coord + lvl.distances[[loc, 1]] * stride) * snippet_duration_sec)
                .clamp(0.0, video_duration_sec);
            if start >= end {
                continue;
            }
            cands.push(Candidate {
                start_sec: start,
                end_sec: end,
                score,
                level,
                location: loc,
            });
        }
    }
    cands.sort_by(rank);
    cands.truncate(cfg.pre_nms_topk);
    Ok(cands)
}

/// Gaussian soft-NMS (or hard suppression): repeatedly take the best-ranked
/// candidate, then decay every remaining score by `exp(-iou^2 / sigma)`
/// (soft) or drop overlaps above `hard_iou` (hard). Stops after `keep_topk`
/// selections; decayed scores below `score_threshold` are discarded.
pub fn soft_nms(cands: &[Candidate], cfg: &DecodeConfig) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let mut pool: Vec<Candidate> = cands.to_vec();
    let mut selected = Vec::new();
    while !pool.is_empty() && selected.len() < cfg.keep_topk {
        let best_idx = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| rank(a, b))
            .map(|(i, _)| i)
            .expect("pool not empty");
        let best = pool.swap_remove(best_idx);
        pool.retain_mut(|c| {
            let iou = temporal_iou(best.moment(), c.moment());
            match cfg.nms {
                NmsMode::SoftGaussian => {
                    c.score *= (-iou * iou / cfg.soft_sigma).exp();
                    c.score >= cfg.score_threshold
                }
                NmsMode::Hard => iou <= cfg.hard_iou,
            }
        });
        selected.push(best);
    }
    Ok(selected)
}

/// Weight-scale each model's scores, pool everything, and re-run NMS.
/// Scores are capped at 1 so the candidate invariant survives weights > 1.
pub fn ensemble_predictions(
    lists: &[(Vec<Candidate>, f64)],
    cfg: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    if lists.is_empty() {
        return Err(Error::Validation("ensemble needs at least one model".into()));
    }
    let mut pooled = Vec::new();
    for (cands, weight) in lists {
        if *weight <= 0.0 {
            return Err(Error::Validation(format!(
                "ensemble weight must be > 0, got {weight}"
            )));
        }
        for c in cands {
            let mut c = c.clone();
            c.score = (c.score * weight).min(1.0);
            pooled.push(c);
        }
    }
    soft_nms(&pooled, cfg)
}
