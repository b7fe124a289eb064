//! Gini impurity and exhaustive CART split search.
//!
//! Candidate splits are compared with exact integer arithmetic: for a node
//! of `n` rows split into `(pl, nl)` positives/size on the left and
//! `(pr, nr)` on the right, the weighted impurity is
//! `2 * (pl*(nl-pl)*nr + pr*(nr-pr)*nl) / (n * nl * nr)`, so two splits are
//! ordered by cross-multiplying those rationals. Ties fall back to the lower
//! feature index, then the lower threshold.

use super::ForestError;

/// `1 - p+^2 - p-^2` over a set of boolean labels.
pub fn gini(labels: &[bool]) -> Result<f64, ForestError> {
    if labels.is_empty() {
        return Err(ForestError::EmptyLabels);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    Ok(gini_counts(positives, labels.len()))
}

pub(crate) fn gini_counts(positives: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = positives as f64 / total as f64;
    let q = (total - positives) as f64 / total as f64;
    1.0 - p * p - q * q
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    /// Rows with `value <= threshold` go left.
    pub threshold: f64,
    /// Child-size-weighted Gini impurity of the partition.
    pub impurity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRow {
    pub values: Vec<f64>,
    pub label: bool,
}

impl LabeledRow {
    pub fn new(values: Vec<f64>, label: bool) -> Self {
        LabeledRow { values, label }
    }
}

/// Exact weighted impurity `num / den` (up to the common factor `2 / n`).
#[derive(Clone, Copy)]
struct Score {
    num: u128,
    den: u128,
}

impl Score {
    fn of(pl: u128, nl: u128, pr: u128, nr: u128) -> Self {
        Score {
            num: pl * (nl - pl) * nr + pr * (nr - pr) * nl,
            den: nl * nr,
        }
    }

    fn less_than(self, other: Score) -> bool {
        self.num * other.den < other.num * self.den
    }
}

/// Midpoint between two consecutive distinct values; never rounds up to
/// the upper value so `<=` routing matches the sweep.
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = (lo + hi) / 2.0;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

/// Best split over the rows selected by `index` (which may repeat rows, as
/// in a bootstrap sample). Children must hold at least `min_leaf` rows.
pub(crate) fn search<F>(
    value: F,
    labels: &[bool],
    index: &[usize],
    candidates: &[usize],
    min_leaf: usize,
) -> Option<Split>
where
    F: Fn(usize, usize) -> f64,
{
    let n = index.len();
    if n < 2 {
        return None;
    }
    let positives = index.iter().filter(|&&r| labels[r]).count();
    if positives == 0 || positives == n {
        return None;
    }
    let (n128, p128) = (n as u128, positives as u128);

    let mut features: Vec<usize> = candidates.to_vec();
    features.sort_unstable();
    features.dedup();

    let mut order: Vec<usize> = index.to_vec();
    let mut best: Option<(Score, usize, f64)> = None;
    for &f in &features {
        order.sort_by(|&a, &b| value(a, f).total_cmp(&value(b, f)));
        let mut left_pos = 0usize;
        for i in 1..n {
            left_pos += usize::from(labels[order[i - 1]]);
            let (lo, hi) = (value(order[i - 1], f), value(order[i], f));
            if lo >= hi || i < min_leaf || n - i < min_leaf {
                continue;
            }
            let score = Score::of(left_pos as u128, i as u128, p128 - left_pos as u128, (n - i) as u128);
            // strictly better only: earlier features and thresholds win ties
            if best.as_ref().is_none_or(|(b, _, _)| score.less_than(*b)) {
                best = Some((score, f, midpoint(lo, hi)));
            }
        }
    }

    let (score, feature, threshold) = best?;
    // parent impurity 2*P*(n-P)/n^2 versus 2*num/(n*den)
    if score.num * n128 >= p128 * (n128 - p128) * score.den {
        return None;
    }
    Some(Split {
        feature,
        threshold,
        impurity: (2 * score.num) as f64 / (n128 * score.den) as f64,
    })
}

/// Best Gini split of `rows` among `candidate_features`, or `None` when no
/// threshold lowers impurity (including when all labels agree).
pub fn best_split(rows: &[LabeledRow], candidate_features: &[usize]) -> Option<Split> {
    let labels: Vec<bool> = rows.iter().map(|r| r.label).collect();
    let index: Vec<usize> = (0..rows.len()).collect();
    search(|r, f| rows[r].values[f], &labels, &index, candidate_features, 1)
}
