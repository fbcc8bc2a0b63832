//! Non-differentiable evaluation: the binarization ladder, binary dice with
//! the empty-mask convention and the multi-threshold averaged-dice score.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Where a soft map came from; rater averages only take values in
/// `{0, 1/N, ..., 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    BranchAverage,
    RaterAverage,
}

/// A per-pixel map in `[0, 1]`, either the mean of branch foreground
/// probabilities or the mean of rater masks.
#[derive(Debug, Clone)]
pub struct SoftMap {
    pub values: Array2<f32>,
    pub provenance: Provenance,
}

impl SoftMap {
    pub fn new(values: Array2<f32>, provenance: Provenance) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("soft map values must lie in [0, 1]".into()));
        }
        Ok(SoftMap { values, provenance })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Ordered binarization thresholds, strictly increasing within `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdLadder {
    taus: Vec<f64>,
}

impl Default for ThresholdLadder {
    /// The ten probability levels 0.0, 0.1, ..., 0.9.
    fn default() -> Self {
        ThresholdLadder {
            taus: (0..10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl ThresholdLadder {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::InvalidConfig("ladder must be nonempty".into()));
        }
        if taus.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(Error::InvalidConfig("thresholds must lie in [0, 1)".into()));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "thresholds must be strictly increasing".into(),
            ));
        }
        Ok(ThresholdLadder { taus })
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }
}

/// Strict comparison: a pixel is foreground iff its value exceeds `tau`.
/// This is the single place where the threshold comparison is defined. The
/// comparison happens at the map's own f32 precision so that a stored 0.1
/// is not pushed above the threshold 0.1 by widening.
pub fn binarize_mask(m: &SoftMap, tau: f64) -> Result<Array2<bool>> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!(
            "threshold {tau} outside [0, 1)"
        )));
    }
    let tau = tau as f32;
    Ok(m.values.mapv(|v| v > tau))
}

/// `2|a n b| / (|a| + |b|)`; two empty masks agree perfectly (1.0), exactly
/// one empty mask scores 0.0.
pub fn binary_dice(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let mut inter = 0usize;
    let mut ca = 0usize;
    let mut cb = 0usize;
    for (x, y) in a.iter().zip(b.iter()) {
        inter += (*x && *y) as usize;
        ca += *x as usize;
        cb += *y as usize;
    }
    Ok(match (ca, cb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * inter as f64 / (ca + cb) as f64,
    })
}

/// Mean binary dice over the ladder between two soft maps; the auxiliary
/// training loss is the negation of this value.
pub fn staple_score(pred: &SoftMap, gt: &SoftMap, ladder: &ThresholdLadder) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let mut acc = 0.0;
    for &tau in ladder.taus() {
        let a = binarize_mask(pred, tau)?;
        let b = binarize_mask(gt, tau)?;
        acc += binary_dice(&a, &b)?;
    }
    Ok(acc / ladder.taus().len() as f64)
}

/// Auxiliary loss used only for monitoring and model selection.
pub fn aux_loss(pred: &SoftMap, gt: &SoftMap, ladder: &ThresholdLadder) -> Result<f64> {
    Ok(-staple_score(pred, gt, ladder)?)
}

/// Per-case staple score of one evaluated case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub score: f64,
}

/// Scores for a full dataset plus their arithmetic mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub cases: Vec<CaseScore>,
    pub mean_score: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "task,case_id,score";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for c in &self.cases {
            out.push_str(&format!("{},{},{}\n", self.task, c.case_id, c.score));
        }
        out
    }
}

/// Scores aligned prediction/ground-truth pairs and averages them.
pub fn evaluate_dataset(
    task: &str,
    case_ids: &[String],
    preds: &[SoftMap],
    gts: &[SoftMap],
    ladder: &ThresholdLadder,
) -> Result<EvalReport> {
    if preds.len() != gts.len() || preds.len() != case_ids.len() {
        return Err(Error::shape(
            format!("{} aligned cases", case_ids.len()),
            format!("{} preds / {} gts", preds.len(), gts.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::InvalidConfig("no cases to evaluate".into()));
    }
    let mut cases = Vec::with_capacity(preds.len());
    let mut acc = 0.0;
    for ((id, p), g) in case_ids.iter().zip(preds).zip(gts) {
        let score = staple_score(p, g, ladder)?;
        acc += score;
        cases.push(CaseScore {
            case_id: id.clone(),
            score,
        });
    }
    Ok(EvalReport {
        task: task.to_string(),
        cases,
        mean_score: acc / preds.len() as f64,
    })
}
