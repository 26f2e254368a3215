//! Annotations, precomputed features, the narration-derived pretraining
//! corpus, and synthetic planted-signal datasets.
//!
//! File formats:
//! - annotations: UTF-8 JSON Lines, one record per line with `video_id`,
//!   `query_id`, `start_sec`/`end_sec` (or `timestamp_sec` for narrations)
//!   and `split`;
//! - features: `<video_id>.f32` raw little-endian float32, row-major
//!   `[T x D]`, next to a `<video_id>.json` sidecar
//!   `{"T": int, "D": int, "snippet_duration_sec": float}`;
//! - query tokens: the same raster+sidecar convention keyed by `query_id`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SNIPPET_DURATION_SEC: f64 = 0.53;

/// Snippets of context on each side of a bare narration timestamp when no
/// clip bounds are given.
pub const NARRATION_CONTEXT_SNIPPETS: f64 = 4.0;

/// A temporal interval in seconds; the grounding target and prediction unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub start_sec: f64,
    pub end_sec: f64,
}

impl Moment {
    pub fn new(start_sec: f64, end_sec: f64) -> Result<Self> {
        if !(start_sec.is_finite() && end_sec.is_finite()) || start_sec < 0.0 {
            return Err(Error::Validation(format!(
                "moment [{start_sec}, {end_sec}] must be finite and nonnegative"
            )));
        }
        if start_sec >= end_sec {
            return Err(Error::Validation(format!(
                "moment [{start_sec}, {end_sec}] must satisfy start < end"
            )));
        }
        Ok(Moment { start_sec, end_sec })
    }

    pub fn width(&self) -> f64 {
        self.end_sec - self.start_sec
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start_sec + self.end_sec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

/// One (video, query, moment) supervision tuple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingSample {
    pub video_id: String,
    pub query_id: String,
    pub moment: Moment,
    pub split: Split,
}

/// Dense per-snippet feature raster for one video. Valid rows form a prefix;
/// padding only at the tail.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub video_id: String,
    pub data: Array2<f32>,
    pub snippet_duration_sec: f64,
    pub valid_mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(video_id: String, data: Array2<f32>, snippet_duration_sec: f64) -> Result<Self> {
        let t = data.nrows();
        let seq = FeatureSequence {
            video_id,
            valid_mask: vec![true; t],
            data,
            snippet_duration_sec,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, d) = self.data.dim();
        if t < 1 || d < 1 {
            return Err(Error::Validation(format!(
                "feature raster for {} must be at least 1x1, got {t}x{d}",
                self.video_id
            )));
        }
        if self.valid_mask.len() != t {
            return Err(Error::Validation(format!(
                "mask length {} does not match T={t} for {}",
                self.valid_mask.len(),
                self.video_id
            )));
        }
        check_prefix_mask(&self.valid_mask, &self.video_id)?;
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature values in {}",
                self.video_id
            )));
        }
        if !(self.snippet_duration_sec.is_finite() && self.snippet_duration_sec > 0.0) {
            return Err(Error::Validation(format!(
                "snippet duration must be positive for {}",
                self.video_id
            )));
        }
        Ok(())
    }

    /// Total extent in seconds (padding included).
    pub fn duration_sec(&self) -> f64 {
        self.data.nrows() as f64 * self.snippet_duration_sec
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|v| **v).count()
    }
}

/// Token-feature sequence for one query.
#[derive(Debug, Clone)]
pub struct QueryTokens {
    pub query_id: String,
    pub data: Array2<f32>,
    pub valid_mask: Vec<bool>,
}

impl QueryTokens {
    pub fn new(query_id: String, data: Array2<f32>) -> Result<Self> {
        let l = data.nrows();
        let q = QueryTokens {
            query_id,
            valid_mask: vec![true; l],
            data,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        let (l, d) = self.data.dim();
        if l < 1 || d < 1 {
            return Err(Error::Validation(format!(
                "token raster for {} must be at least 1x1, got {l}x{d}",
                self.query_id
            )));
        }
        if self.valid_mask.len() != l {
            return Err(Error::Validation(format!(
                "mask length mismatch for {}",
                self.query_id
            )));
        }
        check_prefix_mask(&self.valid_mask, &self.query_id)?;
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite token values in {}",
                self.query_id
            )));
        }
        Ok(())
    }
}

fn check_prefix_mask(mask: &[bool], what: &str) -> Result<()> {
    let mut seen_invalid = false;
    for &m in mask {
        if m && seen_invalid {
            return Err(Error::Validation(format!(
                "mask for {what} is not prefix-valid (padding must be at the tail)"
            )));
        }
        seen_invalid |= !m;
    }
    if mask.is_empty() || !mask[0] {
        return Err(Error::Validation(format!(
            "mask for {what} has no valid positions"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Feature files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMeta {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(default = "default_snippet")]
    pub snippet_duration_sec: f64,
}

fn default_snippet() -> f64 {
    DEFAULT_SNIPPET_DURATION_SEC
}

impl FeatureMeta {
    pub fn duration_sec(&self) -> f64 {
        self.t as f64 * self.snippet_duration_sec
    }
}

/// Duration metadata per id, from the sidecars of a feature directory.
pub type FeatureIndex = BTreeMap<String, FeatureMeta>;

/// Read every `<id>.json` sidecar under `dir` into an index.
pub fn scan_feature_dir(dir: &Path) -> Result<FeatureIndex> {
    let mut index = FeatureIndex::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format(format!("bad sidecar name {}", path.display())))?
            .to_string();
        let meta = read_sidecar(&path)?;
        index.insert(stem, meta);
    }
    Ok(index)
}

fn read_sidecar(path: &Path) -> Result<FeatureMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta: FeatureMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("sidecar {}: {e}", path.display())))?;
    if meta.t < 1 || meta.d < 1 {
        return Err(Error::Format(format!(
            "sidecar {} must have T >= 1 and D >= 1",
            path.display()
        )));
    }
    Ok(meta)
}

fn raster_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.f32")), dir.join(format!("{id}.json")))
}

fn load_raster(dir: &Path, id: &str) -> Result<(Array2<f32>, FeatureMeta)> {
    let (bin_path, json_path) = raster_paths(dir, id);
    let meta = read_sidecar(&json_path)?;
    let mut file = fs::File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(&bin_path, e))?;
    let expected = meta.t * meta.d * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: raster holds {} bytes, sidecar implies {} ({}x{} float32)",
            bin_path.display(),
            bytes.len(),
            expected,
            meta.t,
            meta.d
        )));
    }
    let mut values = Vec::with_capacity(meta.t * meta.d);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let data = Array2::from_shape_vec((meta.t, meta.d), values)
        .expect("shape from sidecar was checked");
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation(format!(
            "{}: non-finite feature values",
            bin_path.display()
        )));
    }
    Ok((data, meta))
}

fn write_raster(dir: &Path, id: &str, data: &Array2<f32>, snippet_duration_sec: f64) -> Result<()> {
    let (bin_path, json_path) = raster_paths(dir, id);
    let meta = FeatureMeta {
        t: data.nrows(),
        d: data.ncols(),
        snippet_duration_sec,
    };
    let mut file = fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    for &v in data.iter() {
        file.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
    }
    let text = serde_json::to_string(&meta).expect("sidecar serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Load `<video_id>.f32` + `<video_id>.json` from `dir`.
pub fn load_feature_file(dir: &Path, video_id: &str) -> Result<FeatureSequence> {
    let (data, meta) = load_raster(dir, video_id)?;
    FeatureSequence::new(video_id.to_string(), data, meta.snippet_duration_sec)
}

pub fn write_feature_file(dir: &Path, seq: &FeatureSequence) -> Result<()> {
    write_raster(dir, &seq.video_id, &seq.data, seq.snippet_duration_sec)
}

/// Load `<query_id>.f32` + `<query_id>.json` from `dir`.
pub fn load_query_file(dir: &Path, query_id: &str) -> Result<QueryTokens> {
    let (data, _) = load_raster(dir, query_id)?;
    QueryTokens::new(query_id.to_string(), data)
}

pub fn write_query_file(dir: &Path, q: &QueryTokens) -> Result<()> {
    write_raster(dir, &q.query_id, &q.data, DEFAULT_SNIPPET_DURATION_SEC)
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    video_id: String,
    query_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    start_sec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    end_sec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timestamp_sec: Option<f64>,
    split: Split,
}

/// Read JSON Lines annotations. When `index` is given, moments are clamped
/// to `[0, video duration]`; records that collapse under clamping are
/// validation errors. Pretrain records may carry `timestamp_sec` instead of
/// a window; those get a default context window around the timestamp.
pub fn load_annotations(path: &Path, index: Option<&FeatureIndex>) -> Result<Vec<GroundingSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let meta = index.and_then(|ix| ix.get(&rec.video_id));
        let snippet = meta
            .map(|m| m.snippet_duration_sec)
            .unwrap_or(DEFAULT_SNIPPET_DURATION_SEC);
        let (mut start, mut end) = match (rec.start_sec, rec.end_sec, rec.timestamp_sec) {
            (Some(s), Some(e), _) => (s, e),
            (None, None, Some(ts)) => {
                let half = NARRATION_CONTEXT_SNIPPETS * snippet;
                (ts - half, ts + half)
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: "record needs start_sec+end_sec or timestamp_sec".into(),
                })
            }
        };
        start = start.max(0.0);
        if let Some(meta) = meta {
            let dur = meta.duration_sec();
            start = start.min(dur);
            end = end.min(dur);
        }
        if start >= end {
            return Err(Error::Validation(format!(
                "{}:{lineno}: record (video {}, query {}) has empty window [{start}, {end}] after clamping",
                path.display(),
                rec.video_id,
                rec.query_id
            )));
        }
        samples.push(GroundingSample {
            video_id: rec.video_id,
            query_id: rec.query_id,
            moment: Moment {
                start_sec: start,
                end_sec: end,
            },
            split: rec.split,
        });
    }
    Ok(samples)
}

pub fn write_annotations(path: &Path, samples: &[GroundingSample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let rec = AnnotationRecord {
            video_id: s.video_id.clone(),
            query_id: s.query_id.clone(),
            start_sec: Some(s.moment.start_sec),
            end_sec: Some(s.moment.end_sec),
            timestamp_sec: None,
            split: s.split,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Temporal response jittering and the pretraining corpus
// ---------------------------------------------------------------------------

/// Boundary-jitter parameters. The perturbation model (Gaussian center
/// shift, uniform width scale) is a stand-in for the upstream augmentation
/// recipe, which is not public; the defaults here are placeholders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JitterConfig {
    pub center_sigma_frac: f64,
    pub width_scale_min: f64,
    pub width_scale_max: f64,
    pub seed: u64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            center_sigma_frac: 0.25,
            width_scale_min: 0.75,
            width_scale_max: 1.25,
            seed: 0,
        }
    }
}

impl JitterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.center_sigma_frac < 0.0 {
            return Err(Error::Config("center_sigma_frac must be >= 0".into()));
        }
        if !(self.width_scale_min > 0.0 && self.width_scale_min <= self.width_scale_max) {
            return Err(Error::Config(
                "need 0 < width_scale_min <= width_scale_max".into(),
            ));
        }
        Ok(())
    }
}

/// Randomly shift the center and rescale the width of a moment, keeping the
/// result inside `[0, video_duration_sec]` and at least `min_width_sec` wide
/// (one snippet). A clamp that would empty the window re-centers a
/// minimum-width window instead.
pub fn jitter_boundaries(
    moment: Moment,
    video_duration_sec: f64,
    min_width_sec: f64,
    cfg: &JitterConfig,
    rng: &mut ChaCha8Rng,
) -> Moment {
    let w = moment.width();
    let c = moment.center();
    let sigma = cfg.center_sigma_frac * w;
    let delta = if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("sigma > 0").sample(rng)
    } else {
        0.0
    };
    let u = if cfg.width_scale_max > cfg.width_scale_min {
        rng.gen_range(cfg.width_scale_min..cfg.width_scale_max)
    } else {
        cfg.width_scale_min
    };
    let center = (c + delta).clamp(0.0, video_duration_sec);
    let half = 0.5 * (w * u);
    let start = (center - half).max(0.0);
    let end = (center + half).min(video_duration_sec);
    let min_w = min_width_sec.min(video_duration_sec);
    if end - start < min_w {
        let start = (center - 0.5 * min_w).clamp(0.0, video_duration_sec - min_w);
        return Moment {
            start_sec: start,
            end_sec: start + min_w,
        };
    }
    Moment {
        start_sec: start,
        end_sec: end,
    }
}

/// A narration anchor: a timestamp, optionally with clip bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Narration {
    pub video_id: String,
    pub timestamp_sec: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_bounds: Option<(f64, f64)>,
    /// Id under which the narration's token features are stored. Derived
    /// from the narration index when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
}

/// Raw narration record format (flat bounds fields, like annotations).
#[derive(Debug, Deserialize)]
struct NarrationRecord {
    video_id: String,
    timestamp_sec: f64,
    start_sec: Option<f64>,
    end_sec: Option<f64>,
    query_id: Option<String>,
}

pub fn load_narrations(path: &Path) -> Result<Vec<Narration>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut narrations = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NarrationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let clip_bounds = match (rec.start_sec, rec.end_sec) {
            (Some(s), Some(e)) => Some((s, e)),
            _ => None,
        };
        narrations.push(Narration {
            video_id: rec.video_id,
            timestamp_sec: rec.timestamp_sec,
            clip_bounds,
            query_id: rec.query_id,
        });
    }
    Ok(narrations)
}

/// Output of [`build_pretrain_corpus`]: samples plus a skip counter for
/// narrations whose video had no metadata.
#[derive(Debug)]
pub struct CorpusBuild {
    pub samples: Vec<GroundingSample>,
    pub skipped: usize,
}

/// Turn narrations into pretraining samples: initialize each moment from the
/// clip bounds when present, otherwise a default context window around the
/// timestamp, then jitter. Narrations for unknown videos are skipped and
/// counted.
pub fn build_pretrain_corpus(
    narrations: &[Narration],
    jitter: &JitterConfig,
    index: &FeatureIndex,
) -> Result<CorpusBuild> {
    jitter.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(jitter.seed);
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for (i, n) in narrations.iter().enumerate() {
        let Some(meta) = index.get(&n.video_id) else {
            skipped += 1;
            continue;
        };
        let duration = meta.duration_sec();
        let snippet = meta.snippet_duration_sec;
        let (start, end) = match n.clip_bounds {
            Some((s, e)) => (s, e),
            None => {
                let half = NARRATION_CONTEXT_SNIPPETS * snippet;
                (n.timestamp_sec - half, n.timestamp_sec + half)
            }
        };
        let start = start.clamp(0.0, duration);
        let end = end.clamp(0.0, duration);
        if start >= end {
            return Err(Error::Validation(format!(
                "narration {i} on {} gives empty window [{start}, {end}]",
                n.video_id
            )));
        }
        let base = Moment {
            start_sec: start,
            end_sec: end,
        };
        let moment = jitter_boundaries(base, duration, snippet, jitter, &mut rng);
        samples.push(GroundingSample {
            video_id: n.video_id.clone(),
            query_id: n
                .query_id
                .clone()
                .unwrap_or_else(|| format!("narr{i:06}")),
            moment,
            split: Split::Pretrain,
        });
    }
    Ok(CorpusBuild { samples, skipped })
}

// ---------------------------------------------------------------------------
// Synthetic planted-signal datasets
// ---------------------------------------------------------------------------

/// Desk-scale dataset generator settings. Each query gets a latent signature
/// vector; its tokens are noisy copies of the signature and a fixed linear
/// embedding of the signature is added to the video features inside the
/// ground-truth moment, so the task is solvable by cross-modal attention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_videos: usize,
    pub t_range: (usize, usize),
    pub d: usize,
    pub d_t: usize,
    pub l_range: (usize, usize),
    pub queries_per_video: usize,
    pub signal_gain: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_videos: 16,
            t_range: (96, 128),
            d: 64,
            d_t: 32,
            l_range: (4, 10),
            queries_per_video: 1,
            signal_gain: 2.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos < 1 || self.queries_per_video < 1 {
            return Err(Error::Config("need at least one video and query".into()));
        }
        if self.t_range.0 < 4 || self.t_range.0 > self.t_range.1 {
            return Err(Error::Config("t_range must be nonempty with min >= 4".into()));
        }
        if self.l_range.0 < 1 || self.l_range.0 > self.l_range.1 {
            return Err(Error::Config("l_range must be nonempty".into()));
        }
        if self.d < 1 || self.d_t < 1 {
            return Err(Error::Config("d and d_t must be >= 1".into()));
        }
        if self.signal_gain < 0.0 || self.noise_sigma <= 0.0 {
            return Err(Error::Config(
                "signal_gain must be >= 0 and noise_sigma > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct SyntheticDataset {
    pub features: Vec<FeatureSequence>,
    pub queries: Vec<QueryTokens>,
    pub samples: Vec<GroundingSample>,
}

/// Deterministic pure function of the config: identical seeds give
/// identical bytes.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    generate_synthetic_split(cfg, Split::Train, "")
}

/// Same generator with a split label and an id prefix, so several splits
/// drawn with different seeds can coexist in one directory.
pub fn generate_synthetic_split(
    cfg: &SyntheticConfig,
    split: Split,
    id_prefix: &str,
) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let snippet = DEFAULT_SNIPPET_DURATION_SEC;
    let std_embed = Normal::new(0.0, 1.0 / (cfg.d_t as f64).sqrt()).unwrap();
    let std_unit = Normal::new(0.0, 1.0).unwrap();
    let std_noise = Normal::new(0.0, cfg.noise_sigma).unwrap();
    let std_token = Normal::new(0.0, 0.1).unwrap();

    // fixed signature-to-video embedding, shared across the dataset
    let embed =
        Array2::from_shape_fn((cfg.d, cfg.d_t), |_| std_embed.sample(&mut rng) as f32);

    let mut features = Vec::with_capacity(cfg.num_videos);
    let mut queries = Vec::new();
    let mut samples = Vec::new();

    for vi in 0..cfg.num_videos {
        let video_id = format!("{id_prefix}v{vi:04}");
        let t = rng.gen_range(cfg.t_range.0..=cfg.t_range.1);
        let duration = t as f64 * snippet;
        let mut data =
            Array2::from_shape_fn((t, cfg.d), |_| std_noise.sample(&mut rng) as f32);

        for qi in 0..cfg.queries_per_video {
            let query_id = format!("{video_id}_q{qi:02}");
            // latent signature
            let sig: Vec<f64> = (0..cfg.d_t).map(|_| std_unit.sample(&mut rng)).collect();
            let l = rng.gen_range(cfg.l_range.0..=cfg.l_range.1);
            let tokens = Array2::from_shape_fn((l, cfg.d_t), |(_, j)| {
                (sig[j] + std_token.sample(&mut rng)) as f32
            });

            // width log-uniform across the regression ranges this T can host
            let min_w = 2.0f64;
            let max_w = (0.9 * t as f64).max(min_w + 0.5);
            let w_snippets = min_w * (max_w / min_w).powf(rng.gen_range(0.0..1.0));
            let w = w_snippets * snippet;
            let start = rng.gen_range(0.0..(duration - w));
            let moment = Moment {
                start_sec: start,
                end_sec: start + w,
            };

            // plant the embedded signature on snippets whose center is inside
            let planted = embed.dot(
                &ndarray::Array1::from_iter(sig.iter().map(|v| *v as f32)),
            );
            let mut any = false;
            for row in 0..t {
                let center = (row as f64 + 0.5) * snippet;
                if center >= moment.start_sec && center <= moment.end_sec {
                    any = true;
                    for j in 0..cfg.d {
                        data[[row, j]] += cfg.signal_gain as f32 * planted[j];
                    }
                }
            }
            if !any {
                // sub-snippet moment: plant on the nearest row
                let row = ((moment.center() / snippet - 0.5).round().max(0.0) as usize).min(t - 1);
                for j in 0..cfg.d {
                    data[[row, j]] += cfg.signal_gain as f32 * planted[j];
                }
            }

            queries.push(QueryTokens::new(query_id.clone(), tokens)?);
            samples.push(GroundingSample {
                video_id: video_id.clone(),
                query_id,
                moment,
                split,
            });
        }
        features.push(FeatureSequence::new(video_id, data, snippet)?);
    }

    Ok(SyntheticDataset {
        features,
        queries,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn load_annotations_counts_lines() {
        let dir = tmpdir();
        let path = dir.path().join("ann.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"video_id":"v0","query_id":"q0","start_sec":1.0,"end_sec":3.0,"split":"train"}"#,
                "\n",
                r#"{"video_id":"v0","query_id":"q1","start_sec":2.0,"end_sec":8.5,"split":"val"}"#,
                "\n",
            ),
        )
        .unwrap();
        let samples = load_annotations(&path, None).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].query_id, "q0");
        assert_eq!(samples[1].split, Split::Val);
    }

    #[test]
    fn load_annotations_rejects_empty_window() {
        let dir = tmpdir();
        let path = dir.path().join("ann.jsonl");
        std::fs::write(
            &path,
            r#"{"video_id":"v0","query_id":"q0","start_sec":3.0,"end_sec":3.0,"split":"train"}"#,
        )
        .unwrap();
        let err = load_annotations(&path, None).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn load_annotations_reports_parse_line() {
        let dir = tmpdir();
        let path = dir.path().join("ann.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"video_id":"v0","query_id":"q0","start_sec":1.0,"end_sec":3.0,"split":"train"}"#,
                "\n",
                "not json\n",
            ),
        )
        .unwrap();
        match load_annotations(&path, None).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn load_annotations_missing_file_is_io() {
        let err = load_annotations(Path::new("/nonexistent/ann.jsonl"), None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn narration_timestamp_gets_context_window() {
        let dir = tmpdir();
        let path = dir.path().join("ann.jsonl");
        std::fs::write(
            &path,
            r#"{"video_id":"v0","query_id":"q0","timestamp_sec":10.0,"split":"pretrain"}"#,
        )
        .unwrap();
        let samples = load_annotations(&path, None).unwrap();
        assert_abs_diff_eq!(samples[0].moment.start_sec, 7.88, epsilon = 1e-9);
        assert_abs_diff_eq!(samples[0].moment.end_sec, 12.12, epsilon = 1e-9);
    }

    #[test]
    fn feature_file_shape_echo_and_length_check() {
        let dir = tmpdir();
        let data = Array2::from_shape_fn((64, 512), |(i, j)| (i * 31 + j) as f32 * 0.01);
        let seq = FeatureSequence::new("vid".into(), data, 0.53).unwrap();
        write_feature_file(dir.path(), &seq).unwrap();
        let loaded = load_feature_file(dir.path(), "vid").unwrap();
        assert_eq!(loaded.data.dim(), (64, 512));
        assert_abs_diff_eq!(loaded.snippet_duration_sec, 0.53);

        // one float short -> format error
        let bin = dir.path().join("vid.f32");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_feature_file(dir.path(), "vid").unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    proptest! {
        #[test]
        fn feature_roundtrip_is_bit_exact(t in 1usize..60, d in 1usize..48, seed in 0u64..1000) {
            let dir = tmpdir();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((t, d), |_| rng.gen_range(-1000.0f32..1000.0));
            let seq = FeatureSequence::new("x".into(), data.clone(), 0.53).unwrap();
            write_feature_file(dir.path(), &seq).unwrap();
            let loaded = load_feature_file(dir.path(), "x").unwrap();
            prop_assert_eq!(loaded.data, data);
        }
    }

    #[test]
    fn feature_roundtrip_extreme_shapes() {
        let dir = tmpdir();
        for (t, d) in [(1usize, 1usize), (1000, 8), (3, 1024)] {
            let mut rng = ChaCha8Rng::seed_from_u64((t * 7 + d) as u64);
            let data = Array2::from_shape_fn((t, d), |_| rng.gen_range(-1e6f32..1e6));
            let id = format!("s{t}x{d}");
            let seq = FeatureSequence::new(id.clone(), data.clone(), 0.53).unwrap();
            write_feature_file(dir.path(), &seq).unwrap();
            assert_eq!(load_feature_file(dir.path(), &id).unwrap().data, data);
        }
    }

    #[test]
    fn prefix_mask_enforced() {
        let mut seq =
            FeatureSequence::new("v".into(), Array2::zeros((4, 2)), 0.53).unwrap();
        seq.valid_mask = vec![true, false, true, true];
        assert!(seq.validate().is_err());
        seq.valid_mask = vec![true, true, false, false];
        assert!(seq.validate().is_ok());
    }

    #[test]
    fn jitter_identity_config() {
        let cfg = JitterConfig {
            center_sigma_frac: 0.0,
            width_scale_min: 1.0,
            width_scale_max: 1.0,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Moment {
            start_sec: 4.0,
            end_sec: 9.0,
        };
        let out = jitter_boundaries(m, 60.0, 0.53, &cfg, &mut rng);
        assert_abs_diff_eq!(out.start_sec, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.end_sec, 9.0, epsilon = 1e-12);
    }

    #[test]
    fn jitter_clamps_to_video() {
        let cfg = JitterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let m = Moment {
            start_sec: 59.0,
            end_sec: 60.0,
        };
        for _ in 0..500 {
            let out = jitter_boundaries(m, 60.0, 0.53, &cfg, &mut rng);
            assert!(out.start_sec >= 0.0 && out.end_sec <= 60.0);
            assert!(out.start_sec < out.end_sec);
            assert!(out.width() >= 0.53 - 1e-9);
        }
    }

    #[test]
    fn jitter_monte_carlo_statistics() {
        // 10k draws on [10, 20] with defaults: center offset mean ~ 0,
        // width mean ~ 10 (uniform scale in [0.75, 1.25])
        let cfg = JitterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Moment {
            start_sec: 10.0,
            end_sec: 20.0,
        };
        let n = 10_000;
        let mut sum_offset = 0.0;
        let mut sum_width = 0.0;
        for _ in 0..n {
            let out = jitter_boundaries(m, 60.0, 0.53, &cfg, &mut rng);
            sum_offset += out.center() - m.center();
            sum_width += out.width();
        }
        assert!((sum_offset / n as f64).abs() < 0.1);
        assert!((sum_width / n as f64 - 10.0).abs() < 0.2);
    }

    fn small_index() -> FeatureIndex {
        let mut ix = FeatureIndex::new();
        ix.insert(
            "v0".into(),
            FeatureMeta {
                t: 114,
                d: 8,
                snippet_duration_sec: 0.53,
            },
        );
        ix
    }

    #[test]
    fn corpus_passes_through_clip_bounds_under_identity_jitter() {
        let jitter = JitterConfig {
            center_sigma_frac: 0.0,
            width_scale_min: 1.0,
            width_scale_max: 1.0,
            seed: 0,
        };
        let narrations = vec![Narration {
            video_id: "v0".into(),
            timestamp_sec: 5.0,
            clip_bounds: Some((3.0, 7.0)),
            query_id: None,
        }];
        let built = build_pretrain_corpus(&narrations, &jitter, &small_index()).unwrap();
        assert_eq!(built.skipped, 0);
        assert_abs_diff_eq!(built.samples[0].moment.start_sec, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(built.samples[0].moment.end_sec, 7.0, epsilon = 1e-12);
        assert_eq!(built.samples[0].split, Split::Pretrain);
    }

    #[test]
    fn corpus_default_window_is_four_snippets() {
        let jitter = JitterConfig {
            center_sigma_frac: 0.0,
            width_scale_min: 1.0,
            width_scale_max: 1.0,
            seed: 0,
        };
        let narrations = vec![Narration {
            video_id: "v0".into(),
            timestamp_sec: 10.0,
            clip_bounds: None,
            query_id: None,
        }];
        let built = build_pretrain_corpus(&narrations, &jitter, &small_index()).unwrap();
        assert_abs_diff_eq!(built.samples[0].moment.start_sec, 7.88, epsilon = 1e-9);
        assert_abs_diff_eq!(built.samples[0].moment.end_sec, 12.12, epsilon = 1e-9);
    }

    #[test]
    fn corpus_skips_unknown_videos_and_counts() {
        let narrations = vec![
            Narration {
                video_id: "v0".into(),
                timestamp_sec: 5.0,
                clip_bounds: None,
                query_id: None,
            },
            Narration {
                video_id: "missing".into(),
                timestamp_sec: 5.0,
                clip_bounds: None,
                query_id: None,
            },
        ];
        let built =
            build_pretrain_corpus(&narrations, &JitterConfig::default(), &small_index()).unwrap();
        assert_eq!(built.samples.len(), 1);
        assert_eq!(built.skipped, 1);
    }

    proptest! {
        #[test]
        fn jittered_samples_satisfy_moment_invariants(
            seed in 0u64..500,
            start in 0.0f64..50.0,
            width in 0.01f64..20.0,
        ) {
            let cfg = JitterConfig { seed, ..JitterConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let duration = 60.0;
            let m = Moment { start_sec: start, end_sec: (start + width).min(duration) };
            let out = jitter_boundaries(m, duration, 0.53, &cfg, &mut rng);
            prop_assert!(out.start_sec >= 0.0);
            prop_assert!(out.end_sec <= duration + 1e-9);
            prop_assert!(out.start_sec < out.end_sec);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            num_videos: 4,
            ..SyntheticConfig::default()
        };
        let a = generate_synthetic_dataset(&cfg).unwrap();
        let b = generate_synthetic_dataset(&cfg).unwrap();
        for (fa, fb) in a.features.iter().zip(&b.features) {
            assert_eq!(fa.data, fb.data);
        }
        for (qa, qb) in a.queries.iter().zip(&b.queries) {
            assert_eq!(qa.data, qb.data);
        }
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.moment.start_sec.to_bits(), sb.moment.start_sec.to_bits());
            assert_eq!(sa.moment.end_sec.to_bits(), sb.moment.end_sec.to_bits());
        }
    }

    #[test]
    fn synthetic_counts_match_config() {
        let cfg = SyntheticConfig {
            num_videos: 16,
            queries_per_video: 2,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(ds.features.len(), 16);
        assert_eq!(ds.samples.len(), 32);
        assert_eq!(ds.queries.len(), 32);
        for s in &ds.samples {
            assert!(s.moment.end_sec > s.moment.start_sec);
        }
    }

    #[test]
    fn zero_gain_features_independent_of_moments() {
        // permutation test: with signal_gain = 0 the inside/outside feature
        // energy difference should look like chance
        let cfg = SyntheticConfig {
            num_videos: 24,
            signal_gain: 0.0,
            seed: 5,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let stat = |shift: &[usize]| -> f64 {
            let mut total = 0.0;
            for (k, s) in ds.samples.iter().enumerate() {
                let f = &ds.features[k];
                let t = f.data.nrows();
                let snip = f.snippet_duration_sec;
                let (mut inside, mut outside) = (0.0f64, 0.0f64);
                let (mut n_in, mut n_out) = (0usize, 0usize);
                for row in 0..t {
                    let center = ((row + shift[k]) % t) as f64 * snip + 0.5 * snip;
                    let e: f64 = f.data.row(row).iter().map(|v| (*v as f64).powi(2)).sum();
                    if center >= s.moment.start_sec && center <= s.moment.end_sec {
                        inside += e;
                        n_in += 1;
                    } else {
                        outside += e;
                        n_out += 1;
                    }
                }
                if n_in > 0 && n_out > 0 {
                    total += inside / n_in as f64 - outside / n_out as f64;
                }
            }
            total / ds.samples.len() as f64
        };
        let observed = stat(&vec![0; ds.samples.len()]).abs();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut exceed = 0;
        let n_perm = 200;
        for _ in 0..n_perm {
            let shifts: Vec<usize> = ds
                .features
                .iter()
                .map(|f| rng.gen_range(0..f.data.nrows()))
                .collect();
            if stat(&shifts).abs() >= observed {
                exceed += 1;
            }
        }
        let p = exceed as f64 / n_perm as f64;
        assert!(p > 0.01, "p = {p}, features correlate with moments at gain 0");
    }
}
