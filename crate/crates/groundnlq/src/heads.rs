//! Anchor-free prediction heads, pyramid label assignment, and the training
//! loss (sigmoid focal classification + distance-IoU regression).
//!
//! One classification head and one regression head, each two kernel-3
//! convolutions, are shared across all pyramid levels. A location `i` at
//! level `l` (stride `s = 2^l`) sits at snippet coordinate `t_i = (i+0.5)s`
//! and is foreground for a moment `[s0, e0]` (snippet units) iff it lies
//! inside the moment, its larger boundary distance falls in the level's
//! regression range, and it passes center sampling. Regression targets are
//! the boundary distances in stride units.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::autodiff::{Real, Tape, Val};
use crate::data::Moment;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv1d3, LayerNorm, ParamSet, TapeBinding};
use crate::pyramid::{level_lengths, Pyramid};

/// Logit planted at padded positions: effectively minus infinity for the
/// sigmoid without producing NaN.
pub const PADDED_LOGIT: f64 = -1e4;

/// Floor for regression targets (stride units); keeps targets strictly
/// positive even when a boundary coincides with a location center.
pub const MIN_TARGET: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentConfig {
    /// Half-open `(lo, hi]` intervals in snippet units, one per level,
    /// contiguous and covering `(0, inf)`. The open upper end is JSON `null`.
    #[serde(with = "ranges_serde")]
    pub regression_ranges: Vec<(f64, f64)>,
    /// Center-sampling radius in multiples of the level stride.
    pub center_sampling_radius: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub reg_loss_weight: f64,
}

/// JSON cannot hold f64 infinity; the top range's open end maps to `null`.
mod ranges_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ranges: &[(f64, f64)], s: S) -> Result<S::Ok, S::Error> {
        let encoded: Vec<(f64, Option<f64>)> = ranges
            .iter()
            .map(|&(lo, hi)| (lo, if hi.is_finite() { Some(hi) } else { None }))
            .collect();
        encoded.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(f64, f64)>, D::Error> {
        let encoded: Vec<(f64, Option<f64>)> = Vec::deserialize(d)?;
        Ok(encoded
            .into_iter()
            .map(|(lo, hi)| (lo, hi.unwrap_or(f64::INFINITY)))
            .collect())
    }
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig::for_levels(7)
    }
}

impl AssignmentConfig {
    /// Doubling ranges `(0,4], (4,8], (8,16], ...` with an unbounded last
    /// level, one per pyramid level.
    pub fn for_levels(n: usize) -> Self {
        assert!(n >= 1);
        let mut ranges = Vec::with_capacity(n);
        for i in 0..n {
            let lo = if i == 0 { 0.0 } else { (1u64 << (i + 1)) as f64 };
            let hi = if i + 1 == n {
                f64::INFINITY
            } else {
                (1u64 << (i + 2)) as f64
            };
            ranges.push((lo, hi));
        }
        AssignmentConfig {
            regression_ranges: ranges,
            center_sampling_radius: 1.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            reg_loss_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regression_ranges.is_empty() {
            return Err(Error::Config("regression_ranges must not be empty".into()));
        }
        if self.regression_ranges[0].0 != 0.0 {
            return Err(Error::Config("regression_ranges must start at 0".into()));
        }
        for w in self.regression_ranges.windows(2) {
            if w[0].1 != w[1].0 || w[0].0 >= w[0].1 {
                return Err(Error::Config(
                    "regression_ranges must be increasing and contiguous".into(),
                ));
            }
        }
        let last = self.regression_ranges.last().unwrap();
        if last.1 != f64::INFINITY || last.0 >= last.1 {
            return Err(Error::Config("last regression range must reach infinity".into()));
        }
        if self.center_sampling_radius <= 0.0 {
            return Err(Error::Config("center_sampling_radius must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return Err(Error::Config("focal parameters out of range".into()));
        }
        if self.reg_loss_weight < 0.0 {
            return Err(Error::Config("reg_loss_weight must be >= 0".into()));
        }
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.regression_ranges.len()
    }
}

/// Per-level supervision for one sample.
#[derive(Debug, Clone)]
pub struct LevelTargets {
    pub foreground: Vec<bool>,
    /// `[T_l x 2]` start/end distances in stride units; meaningful only at
    /// foreground positions.
    pub targets: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LabelTargets {
    pub levels: Vec<LevelTargets>,
}

impl LabelTargets {
    pub fn n_foreground(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.foreground.iter().filter(|f| **f).count())
            .sum()
    }
}

/// Assign foreground flags and regression targets for one moment over the
/// implied pyramid of a `T`-snippet video. Every moment is guaranteed at
/// least one positive: if the rules produce none (sub-snippet moments), the
/// level-0 location nearest the moment center is forced foreground.
pub fn assign_labels(
    t: usize,
    snippet_duration_sec: f64,
    moment: Moment,
    cfg: &AssignmentConfig,
) -> Result<LabelTargets> {
    cfg.validate()?;
    if t < 1 {
        return Err(Error::Validation("assignment needs T >= 1".into()));
    }
    let duration = t as f64 * snippet_duration_sec;
    if moment.start_sec < 0.0 || moment.end_sec > duration + 1e-6 {
        return Err(Error::Validation(format!(
            "moment [{}, {}] outside video extent {duration}",
            moment.start_sec, moment.end_sec
        )));
    }
    let s = moment.start_sec / snippet_duration_sec;
    let e = moment.end_sec / snippet_duration_sec;
    let center = 0.5 * (s + e);
    let lengths = level_lengths(t, cfg.n_levels());

    let mut levels = Vec::with_capacity(lengths.len());
    let mut any_fg = false;
    for (l, &t_l) in lengths.iter().enumerate() {
        let stride = (1usize << l) as f64;
        let (lo, hi) = cfg.regression_ranges[l];
        let mut foreground = vec![false; t_l];
        let mut targets = Array2::zeros((t_l, 2));
        for i in 0..t_l {
            let coord = (i as f64 + 0.5) * stride;
            if coord < s || coord > e {
                continue;
            }
            let max_dist = (coord - s).max(e - coord);
            if !(max_dist > lo && max_dist <= hi) {
                continue;
            }
            let near_center = (coord - center).abs() <= cfg.center_sampling_radius * stride;
            let short_moment = (e - s) < 2.0 * cfg.center_sampling_radius * stride;
            if !(near_center || short_moment) {
                continue;
            }
            foreground[i] = true;
            any_fg = true;
            targets[[i, 0]] = ((coord - s) / stride).max(MIN_TARGET);
            targets[[i, 1]] = ((e - coord) / stride).max(MIN_TARGET);
        }
        levels.push(LevelTargets { foreground, targets });
    }

    if !any_fg {
        // nearest level-0 location to the center, lowest index on ties
        let t0 = lengths[0];
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for i in 0..t0 {
            let coord = i as f64 + 0.5;
            let dist = (coord - center).abs();
            if dist < best_dist {
                best_dist = dist;
                best = i;
            }
        }
        let coord = best as f64 + 0.5;
        levels[0].foreground[best] = true;
        levels[0].targets[[best, 0]] = (coord - s).max(MIN_TARGET);
        levels[0].targets[[best, 1]] = (e - coord).max(MIN_TARGET);
    }

    Ok(LabelTargets { levels })
}

/// Two-conv head: conv(3) -> LN -> ReLU -> conv(3) to `out_channels`.
pub struct PredictionHead {
    pub conv1: Conv1d3,
    pub ln: LayerNorm,
    pub conv2: Conv1d3,
}

impl PredictionHead {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        out_channels: usize,
        final_bias: f64,
    ) -> Self {
        let std1 = (2.0 / (3 * d_model) as f64).sqrt();
        let std2 = (1.0 / (3 * d_model) as f64).sqrt();
        PredictionHead {
            conv1: Conv1d3::new(ps, rng, &format!("{name}.conv1"), d_model, d_model, std1, 0.0),
            ln: LayerNorm::new(ps, &format!("{name}.ln"), d_model),
            conv2: Conv1d3::new(
                ps,
                rng,
                &format!("{name}.conv2"),
                d_model,
                out_channels,
                std2,
                final_bias,
            ),
        }
    }

    fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        x: Val,
        valid: &Arc<Vec<bool>>,
    ) -> Val {
        let h = self.conv1.forward(tape, bind, ps, x, valid);
        let h = self.ln.forward(tape, bind, ps, h);
        let h = tape.relu(h);
        self.conv2.forward(tape, bind, ps, h, valid)
    }
}

/// The shared classification/regression head pair.
pub struct PredictionHeads {
    pub cls: PredictionHead,
    pub reg: PredictionHead,
}

/// Classification-head final bias; starts predictions near the background
/// prior so focal loss does not swamp early training.
const CLS_PRIOR_BIAS: f64 = -2.0;

impl PredictionHeads {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        PredictionHeads {
            cls: PredictionHead::new(ps, rng, "head.cls", cfg.d_model, 1, CLS_PRIOR_BIAS),
            reg: PredictionHead::new(ps, rng, "head.reg", cfg.d_model, 2, 0.0),
        }
    }

    /// Apply both heads to every pyramid level. Distances go through
    /// softplus, so they are nonnegative.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bind: &mut TapeBinding,
        ps: &ParamSet<F>,
        pyramid: &Pyramid,
    ) -> TapeHeadOutputs {
        let mut levels = Vec::with_capacity(pyramid.levels.len());
        for level in &pyramid.levels {
            let logits = self.cls.forward(tape, bind, ps, level.x, &level.valid);
            let raw = self.reg.forward(tape, bind, ps, level.x, &level.valid);
            let distances = tape.softplus(raw);
            levels.push(TapeLevelOutput {
                logits,
                distances,
                valid: Arc::clone(&level.valid),
            });
        }
        TapeHeadOutputs { levels }
    }
}

/// One level's head outputs still on the tape.
pub struct TapeLevelOutput {
    /// `[T_l x 1]` pre-sigmoid scores.
    pub logits: Val,
    /// `[T_l x 2]` nonnegative start/end distances in stride units.
    pub distances: Val,
    pub valid: Arc<Vec<bool>>,
}

pub struct TapeHeadOutputs {
    pub levels: Vec<TapeLevelOutput>,
}

impl TapeHeadOutputs {
    /// Materialize as plain arrays: padded positions get [`PADDED_LOGIT`]
    /// and zero distances.
    pub fn extract<F: Real>(&self, tape: &Tape<F>) -> HeadOutputs {
        let levels = self
            .levels
            .iter()
            .map(|lvl| {
                let logit_arr = tape.value(lvl.logits);
                let dist_arr = tape.value(lvl.distances);
                let t = logit_arr.nrows();
                let mut logits = vec![0f64; t];
                let mut distances = Array2::zeros((t, 2));
                for i in 0..t {
                    if lvl.valid[i] {
                        logits[i] = logit_arr[[i, 0]].to_f64();
                        distances[[i, 0]] = dist_arr[[i, 0]].to_f64();
                        distances[[i, 1]] = dist_arr[[i, 1]].to_f64();
                    } else {
                        logits[i] = PADDED_LOGIT;
                    }
                }
                HeadLevel {
                    logits,
                    distances,
                    valid: lvl.valid.as_ref().clone(),
                }
            })
            .collect();
        HeadOutputs { levels }
    }
}

/// Plain (off-tape) head outputs for one sample.
#[derive(Debug, Clone)]
pub struct HeadLevel {
    pub logits: Vec<f64>,
    pub distances: Array2<f64>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub levels: Vec<HeadLevel>,
}

/// Scalar loss terms of one sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub regression: f64,
    pub total: f64,
    pub n_foreground: usize,
}

/// Loss still on the tape, for backprop.
pub struct TapeLoss {
    pub total: Val,
    pub classification: Val,
    pub regression: Val,
    pub n_foreground: usize,
}

/// Assemble focal + weighted DIoU loss over all levels of one sample.
/// Focal runs over every valid position and is normalized by
/// `max(1, n_foreground)`; DIoU runs over foreground positions with the
/// same normalization.
pub fn total_loss_on_tape<F: Real>(
    tape: &mut Tape<F>,
    outputs: &TapeHeadOutputs,
    targets: &LabelTargets,
    cfg: &AssignmentConfig,
) -> TapeLoss {
    assert_eq!(outputs.levels.len(), targets.levels.len(), "level count");
    let alpha = F::from_f64(cfg.focal_alpha);
    let gamma = F::from_f64(cfg.focal_gamma);

    let mut n_fg = 0usize;
    for (out, tgt) in outputs.levels.iter().zip(&targets.levels) {
        n_fg += tgt
            .foreground
            .iter()
            .zip(&*out.valid)
            .filter(|(fg, ok)| **fg && **ok)
            .count();
    }
    let norm = F::from_f64(1.0 / (n_fg.max(1) as f64));

    let mut cls_sum: Option<Val> = None;
    let mut reg_sum: Option<Val> = None;
    for (out, tgt) in outputs.levels.iter().zip(&targets.levels) {
        let t_l = out.valid.len();
        assert_eq!(tgt.foreground.len(), t_l, "level length");
        let labels: Vec<i8> = (0..t_l)
            .map(|i| {
                if !out.valid[i] {
                    -1
                } else if tgt.foreground[i] {
                    1
                } else {
                    0
                }
            })
            .collect();
        let per_pos = tape.focal_loss(out.logits, Arc::new(labels), alpha, gamma);
        let level_sum = tape.sum_all(per_pos);
        cls_sum = Some(match cls_sum {
            Some(acc) => tape.add(acc, level_sum),
            None => level_sum,
        });

        let fg_rows: Vec<usize> = (0..t_l)
            .filter(|&i| tgt.foreground[i] && out.valid[i])
            .collect();
        if fg_rows.is_empty() {
            continue;
        }
        let mut sel_targets = Array2::zeros((fg_rows.len(), 2));
        for (k, &i) in fg_rows.iter().enumerate() {
            sel_targets[[k, 0]] = F::from_f64(tgt.targets[[i, 0]]);
            sel_targets[[k, 1]] = F::from_f64(tgt.targets[[i, 1]]);
        }
        let sel = tape.select_rows(out.distances, Arc::new(fg_rows));
        let per_fg = tape.diou_loss(sel, Arc::new(sel_targets));
        let level_sum = tape.sum_all(per_fg);
        reg_sum = Some(match reg_sum {
            Some(acc) => tape.add(acc, level_sum),
            None => level_sum,
        });
    }

    let cls_sum = cls_sum.expect("at least one level");
    let classification = tape.scale(cls_sum, norm);
    let regression = match reg_sum {
        Some(r) => tape.scale(r, norm),
        None => tape.constant(Array2::zeros((1, 1))),
    };
    let weighted = tape.scale(regression, F::from_f64(cfg.reg_loss_weight));
    let total = tape.add(classification, weighted);
    TapeLoss {
        total,
        classification,
        regression,
        n_foreground: n_fg,
    }
}

/// Off-tape loss evaluation (used by tests and the loss report).
pub fn total_loss(
    outputs: &HeadOutputs,
    targets: &LabelTargets,
    cfg: &AssignmentConfig,
) -> (f64, LossBreakdown) {
    let mut tape: Tape<f64> = Tape::new();
    let tape_outputs = lift_outputs(&mut tape, outputs);
    let loss = total_loss_on_tape(&mut tape, &tape_outputs, targets, cfg);
    let breakdown = LossBreakdown {
        classification: tape.value(loss.classification)[[0, 0]],
        regression: tape.value(loss.regression)[[0, 0]],
        total: tape.value(loss.total)[[0, 0]],
        n_foreground: loss.n_foreground,
    };
    (breakdown.total, breakdown)
}

/// Gradient of the total loss w.r.t. every logit, level by level.
pub fn total_loss_logit_gradients(
    outputs: &HeadOutputs,
    targets: &LabelTargets,
    cfg: &AssignmentConfig,
) -> Vec<Vec<f64>> {
    let mut tape: Tape<f64> = Tape::new();
    let tape_outputs = lift_outputs(&mut tape, outputs);
    let loss = total_loss_on_tape(&mut tape, &tape_outputs, targets, cfg);
    let grads = tape.backward(loss.total);
    tape_outputs
        .levels
        .iter()
        .map(|lvl| match grads.get(lvl.logits) {
            Some(g) => g.column(0).to_vec(),
            None => vec![0.0; lvl.valid.len()],
        })
        .collect()
}

fn lift_outputs(tape: &mut Tape<f64>, outputs: &HeadOutputs) -> TapeHeadOutputs {
    let levels = outputs
        .levels
        .iter()
        .map(|lvl| {
            let t = lvl.logits.len();
            let logits = Array2::from_shape_fn((t, 1), |(i, _)| lvl.logits[i]);
            TapeLevelOutput {
                logits: tape.constant(logits),
                distances: tape.constant(lvl.distances.clone()),
                valid: Arc::new(lvl.valid.clone()),
            }
        })
        .collect();
    TapeHeadOutputs { levels }
}
