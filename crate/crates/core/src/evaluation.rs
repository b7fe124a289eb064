//! Holdout evaluation: seeded split, accuracy at 0.5, confusion matrix and
//! ROC AUC via the Mann-Whitney rank statistic.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::features::FeatureVector;
use crate::forest::{predict_risk, ForestError, ForestModel};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("holdout fraction {0} must lie in (0, 1]")]
    InvalidFraction(f64),
    #[error("holdout lacks a class: {positives} escalated and {negatives} non-escalated rows")]
    MissingClass { positives: usize, negatives: usize },
    #[error("row {0} has no label")]
    Unlabeled(String),
    #[error(transparent)]
    Model(#[from] ForestError),
}

pub const DECISION_THRESHOLD: f64 = 0.5;

/// Shuffles vectors (after sorting by ticket id) with the seed and moves
/// `round(fraction * n)` of them into the holdout. Returns `(train, holdout)`.
pub fn split_holdout(
    vectors: &[FeatureVector],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>), EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::InvalidFraction(fraction));
    }
    let mut rows: Vec<FeatureVector> = vectors.to_vec();
    rows.sort_by(|a, b| a.ticket_id.cmp(&b.ticket_id).then(a.as_of.cmp(&b.as_of)));
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_holdout = ((rows.len() as f64) * fraction).round() as usize;
    let train = rows.split_off(n_holdout.min(rows.len()));
    Ok((train, rows))
}

/// Area under the ROC curve. Tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::MissingClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 averaged
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: usize,
    pub positives: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub confusion: Confusion,
}

pub fn evaluate(model: &ForestModel, holdout: &[FeatureVector]) -> Result<EvalReport, EvalError> {
    let mut scores = Vec::with_capacity(holdout.len());
    let mut labels = Vec::with_capacity(holdout.len());
    for fv in holdout {
        labels.push(fv.label.ok_or_else(|| EvalError::Unlabeled(fv.ticket_id.clone()))?);
        scores.push(predict_risk(model, fv)?);
    }
    let auc = auc(&scores, &labels)?;
    let mut c = Confusion {
        true_positive: 0,
        false_positive: 0,
        true_negative: 0,
        false_negative: 0,
    };
    for (&s, &l) in scores.iter().zip(&labels) {
        match (s >= DECISION_THRESHOLD, l) {
            (true, true) => c.true_positive += 1,
            (true, false) => c.false_positive += 1,
            (false, false) => c.true_negative += 1,
            (false, true) => c.false_negative += 1,
        }
    }
    Ok(EvalReport {
        rows: labels.len(),
        positives: c.true_positive + c.false_negative,
        accuracy: (c.true_positive + c.true_negative) as f64 / labels.len() as f64,
        auc,
        confusion: c,
    })
}
