use rand::Rng;
use serde::{Deserialize, Serialize};

use super::split::search;
use super::TrainingData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        positive_count: usize,
        total_count: usize,
    },
    Leaf {
        positive_count: usize,
        total_count: usize,
    },
}

impl Node {
    pub fn counts(&self) -> (usize, usize) {
        match *self {
            Node::Split {
                positive_count,
                total_count,
                ..
            }
            | Node::Leaf {
                positive_count,
                total_count,
            } => (positive_count, total_count),
        }
    }
}

/// Binary CART tree stored as a node arena; children always sit at higher
/// indices than their parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub root: usize,
}

impl DecisionTree {
    /// Positive fraction of the leaf `values` falls into.
    pub fn leaf_fraction(&self, values: &[f64]) -> f64 {
        let mut at = self.root;
        loop {
            match self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => at = if values[feature] <= threshold { left } else { right },
                Node::Leaf {
                    positive_count,
                    total_count,
                } => return positive_count as f64 / total_count as f64,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &DecisionTree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(self, self.root)
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }
}

pub(crate) struct GrowParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub features_per_split: usize,
}

/// Draws `k` distinct feature indices by partial Fisher-Yates.
fn sample_features<R: Rng>(rng: &mut R, n_features: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n_features).collect();
    for i in 0..k {
        let j = rng.random_range(i..n_features);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

pub(crate) fn grow_tree<R: Rng>(data: &TrainingData, sample: Vec<usize>, params: &GrowParams, rng: &mut R) -> DecisionTree {
    let mut nodes = Vec::new();
    let root = grow(&mut nodes, data, sample, 0, params, rng);
    DecisionTree { nodes, root }
}

fn grow<R: Rng>(
    nodes: &mut Vec<Node>,
    data: &TrainingData,
    index: Vec<usize>,
    depth: usize,
    params: &GrowParams,
    rng: &mut R,
) -> usize {
    let total = index.len();
    let positives = index.iter().filter(|&&r| data.labels[r]).count();
    let leaf = Node::Leaf {
        positive_count: positives,
        total_count: total,
    };
    let at = nodes.len();
    nodes.push(leaf);

    let pure = positives == 0 || positives == total;
    if pure || depth >= params.max_depth || total < 2 * params.min_samples_leaf {
        return at;
    }
    let candidates = sample_features(rng, data.n_features(), params.features_per_split);
    let Some(split) = search(
        |r, f| data.value(r, f),
        &data.labels,
        &index,
        &candidates,
        params.min_samples_leaf,
    ) else {
        return at;
    };

    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = index
        .into_iter()
        .partition(|&r| data.value(r, split.feature) <= split.threshold);
    let left = grow(nodes, data, left_rows, depth + 1, params, rng);
    let right = grow(nodes, data, right_rows, depth + 1, params, rng);
    nodes[at] = Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
        positive_count: positives,
        total_count: total,
    };
    at
}
