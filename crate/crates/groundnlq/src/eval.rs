//! Recall@K@tIoU evaluation and the prediction-file format.
//!
//! Prediction files are JSON Lines, one record per query:
//! `{"query_id": str, "predictions": [[start_sec, end_sec, score], ...]}`
//! sorted by descending score. The same format is the ensemble input.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Moment;
use crate::decode::{temporal_iou, Candidate};
use crate::error::{Error, Result};

/// The reported metric grid.
pub const RECALL_KS: [usize; 2] = [1, 5];
pub const RECALL_THRESHOLDS: [f64; 2] = [0.3, 0.5];

pub type PredictionMap = BTreeMap<String, Vec<Candidate>>;
pub type GroundTruthMap = BTreeMap<String, Moment>;

/// Fraction of queries whose top-`k` predictions contain one with
/// `tIoU >= theta` against the ground truth. Queries missing from `preds`
/// count as misses.
pub fn recall_at_k(preds: &PredictionMap, gts: &GroundTruthMap, k: usize, theta: f64) -> Result<f64> {
    if k < 1 {
        return Err(Error::Validation(format!("recall needs K >= 1, got {k}")));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Validation(format!(
            "recall needs a tIoU threshold in (0, 1], got {theta}"
        )));
    }
    if gts.is_empty() {
        return Err(Error::Validation("recall over zero queries".into()));
    }
    let mut hits = 0usize;
    for (query, gt) in gts {
        let hit = preds
            .get(query)
            .map(|cands| {
                cands
                    .iter()
                    .take(k)
                    .any(|c| temporal_iou(c.moment(), *gt) >= theta)
            })
            .unwrap_or(false);
        hits += hit as usize;
    }
    Ok(hits as f64 / gts.len() as f64)
}

/// Recall over the standard grid (R1/R5 at tIoU 0.3/0.5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub r1_03: f64,
    pub r1_05: f64,
    pub r5_03: f64,
    pub r5_05: f64,
    pub n_queries: usize,
}

impl EvalResult {
    pub fn get(&self, k: usize, theta: f64) -> Option<f64> {
        match (k, theta) {
            (1, t) if t == 0.3 => Some(self.r1_03),
            (1, t) if t == 0.5 => Some(self.r1_05),
            (5, t) if t == 0.3 => Some(self.r5_03),
            (5, t) if t == 0.5 => Some(self.r5_05),
            _ => None,
        }
    }

    pub fn table(&self) -> String {
        format!(
            "queries: {}\n\
             R1@0.3  R1@0.5  R5@0.3  R5@0.5\n\
             {:.4}  {:.4}  {:.4}  {:.4}",
            self.n_queries, self.r1_03, self.r1_05, self.r5_03, self.r5_05
        )
    }
}

pub fn evaluate_standard(preds: &PredictionMap, gts: &GroundTruthMap) -> Result<EvalResult> {
    Ok(EvalResult {
        r1_03: recall_at_k(preds, gts, 1, 0.3)?,
        r1_05: recall_at_k(preds, gts, 1, 0.5)?,
        r5_03: recall_at_k(preds, gts, 5, 0.3)?,
        r5_05: recall_at_k(preds, gts, 5, 0.5)?,
        n_queries: gts.len(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    query_id: String,
    predictions: Vec<(f64, f64, f64)>,
}

pub fn write_predictions(path: &Path, preds: &PredictionMap) -> Result<()> {
    let mut out = String::new();
    for (query_id, cands) in preds {
        let rec = PredictionRecord {
            query_id: query_id.clone(),
            predictions: cands
                .iter()
                .map(|c| (c.start_sec, c.end_sec, c.score))
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("prediction record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<PredictionMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut preds = PredictionMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let mut cands = Vec::with_capacity(rec.predictions.len());
        for (i, &(s, e, score)) in rec.predictions.iter().enumerate() {
            if s >= e || !(score > 0.0 && score <= 1.0) {
                return Err(Error::Validation(format!(
                    "{}:{}: bad prediction ({s}, {e}, {score}) for {}",
                    path.display(),
                    lineno + 1,
                    rec.query_id
                )));
            }
            cands.push(Candidate {
                start_sec: s,
                end_sec: e,
                score,
                level: 0,
                location: i,
            });
        }
        preds.insert(rec.query_id, cands);
    }
    Ok(preds)
}
