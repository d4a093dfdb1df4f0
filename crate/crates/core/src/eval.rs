//! Accuracy, precision-recall curves, average precision and error reduction
//! at a fixed recall.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::ClassId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    /// Posterior probability of the positive class.
    pub score: f64,
    pub gold: bool,
}

impl ScoredPrediction {
    pub fn new(score: f64, gold: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("score {score} outside [0, 1]")));
        }
        Ok(ScoredPrediction { score, gold })
    }
}

/// One operating point: everything scoring at least `threshold` is
/// predicted positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Points in increasing threshold order, so recall is non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// Operating point at an arbitrary threshold. Above the highest score
    /// nothing is predicted positive, which has precision 1 and recall 0.
    pub fn at(&self, threshold: f64) -> PrPoint {
        match self.points.iter().find(|p| p.threshold >= threshold) {
            Some(p) => PrPoint { threshold, ..*p },
            None => PrPoint {
                threshold,
                precision: 1.0,
                recall: 0.0,
            },
        }
    }

    pub fn max_recall(&self) -> f64 {
        self.points.first().map_or(0.0, |p| p.recall)
    }

    /// Precision at `recall`, linearly interpolated between neighboring
    /// points in recall, anchored at (recall 0, precision 1).
    pub fn precision_at_recall(&self, recall: f64) -> Result<f64> {
        if !(recall > 0.0 && recall <= 1.0) || recall > self.max_recall() + 1e-12 {
            return Err(Error::RecallUnreachable(recall));
        }
        let mut prev = (0.0, 1.0);
        for p in self.points.iter().rev() {
            if p.recall >= recall {
                if p.recall == recall || p.recall == prev.0 {
                    return Ok(p.precision);
                }
                let t = (recall - prev.0) / (p.recall - prev.0);
                return Ok(prev.1 + t * (p.precision - prev.1));
            }
            prev = (p.recall, p.precision);
        }
        Ok(prev.1)
    }
}

/// Builds the curve with one point per distinct score.
pub fn pr_curve(predictions: &[ScoredPrediction]) -> Result<PrCurve> {
    let positives = predictions.iter().filter(|p| p.gold).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    if let Some(p) = predictions.iter().find(|p| !(0.0..=1.0).contains(&p.score)) {
        return Err(Error::InvalidArgument(format!("score {} outside [0, 1]", p.score)));
    }
    let mut sorted: Vec<&ScoredPrediction> = predictions.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].gold {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: s,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    points.reverse();
    Ok(PrCurve { points })
}

/// Sum of precision times recall increment over the curve, from the highest
/// threshold down.
pub fn average_precision(predictions: &[ScoredPrediction]) -> Result<f64> {
    let curve = pr_curve(predictions)?;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for p in curve.points.iter().rev() {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    Ok(ap)
}

pub fn token_accuracy(labels: &[ClassId], gold: &[ClassId]) -> Result<f64> {
    if labels.len() != gold.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} gold labels",
            labels.len(),
            gold.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    let hits = labels.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `1 - (1 - p_candidate) / (1 - p_baseline)` at the given recall.
pub fn error_reduction_at_recall(baseline: &PrCurve, candidate: &PrCurve, recall: f64) -> Result<f64> {
    let pa = baseline.precision_at_recall(recall)?;
    let pb = candidate.precision_at_recall(recall)?;
    if pa == pb {
        return Ok(0.0);
    }
    if pa >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "baseline precision is 1 at recall {recall}; error reduction undefined"
        )));
    }
    Ok(1.0 - (1.0 - pb) / (1.0 - pa))
}

/// Scores for a binary view of posteriors: probability of `positive`.
pub fn binary_predictions(posteriors: &[Vec<f64>], gold: &[ClassId], positive: ClassId) -> Result<Vec<ScoredPrediction>> {
    if posteriors.len() != gold.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} posteriors for {} gold labels",
            posteriors.len(),
            gold.len()
        )));
    }
    posteriors
        .iter()
        .zip(gold)
        .map(|(p, &g)| {
            let score = *p
                .get(positive)
                .ok_or_else(|| Error::InvalidArgument(format!("positive class {positive} outside K={}", p.len())))?;
            ScoredPrediction::new(score.clamp(0.0, 1.0), g == positive)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReduction {
    pub recall: f64,
    pub baseline_precision: f64,
    pub candidate_precision: f64,
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub instances: usize,
    pub positive_class: ClassId,
    pub accuracy: f64,
    pub average_precision: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub error_reductions: Vec<ErrorReduction>,
}

pub fn compare_at_recalls(baseline: &PrCurve, candidate: &PrCurve, recalls: &[f64]) -> Result<Vec<ErrorReduction>> {
    recalls
        .iter()
        .map(|&r| {
            Ok(ErrorReduction {
                recall: r,
                baseline_precision: baseline.precision_at_recall(r)?,
                candidate_precision: candidate.precision_at_recall(r)?,
                reduction: error_reduction_at_recall(baseline, candidate, r)?,
            })
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(curve: &PrCurve, mut w: W) -> Result<()> {
    writeln!(w, "threshold,precision,recall")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    Ok(())
}
