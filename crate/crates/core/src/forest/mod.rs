//! Random forest classifier for escalation risk.
//!
//! Training rows are first put in canonical order (by ticket id, then
//! `as_of`) so the model does not depend on input order. Tree `t` draws its
//! bootstrap sample and per-node feature subsets from ChaCha8 stream `t` of
//! the configured seed, which makes trees independent of each other and lets
//! parallel and serial training agree bit for bit.

mod io;
mod split;
mod tree;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::FeatureVector;
use crate::model::Timestamp;

pub use io::{deserialize_model, serialize_model, MODEL_FORMAT, MODEL_FORMAT_VERSION};
pub use split::{best_split, gini, LabeledRow, Split};
pub use tree::{DecisionTree, Node};

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("labels must not be empty")]
    EmptyLabels,
    #[error("training data is empty")]
    EmptyData,
    #[error("degenerate labels: training data needs both escalated and non-escalated rows")]
    DegenerateLabels,
    #[error("training row {0} has no label")]
    MissingLabel(String),
    #[error("schema mismatch: expected {expected:?}, found {found:?}")]
    SchemaMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("corrupt model: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// `None` means `ceil(sqrt(n_features))`.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_trees: 100,
            max_depth: 12,
            min_samples_leaf: 2,
            features_per_split: None,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// Fills in `features_per_split` and checks every bound.
    pub fn resolve(&self, n_features: usize) -> Result<TrainConfig, ForestError> {
        let bad = |m: &str| Err(ForestError::InvalidConfig(m.to_string()));
        if n_features == 0 {
            return bad("no features");
        }
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be at least 1");
        }
        let k = self
            .features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize);
        if k == 0 || k > n_features {
            return Err(ForestError::InvalidConfig(format!(
                "features_per_split {k} must lie in 1..={n_features}"
            )));
        }
        Ok(TrainConfig {
            features_per_split: Some(k),
            ..self.clone()
        })
    }
}

/// Dense, canonically ordered training matrix.
#[derive(Debug, Clone)]
pub struct TrainingData {
    schema: Vec<String>,
    ids: Vec<String>,
    values: Vec<f64>,
    labels: Vec<bool>,
    latest: Timestamp,
}

impl TrainingData {
    pub fn from_vectors(vectors: &[FeatureVector]) -> Result<Self, ForestError> {
        let first = vectors.first().ok_or(ForestError::EmptyData)?;
        let schema: Vec<String> = first.names().map(str::to_string).collect();
        let mut order: Vec<&FeatureVector> = vectors.iter().collect();
        order.sort_by(|a, b| a.ticket_id.cmp(&b.ticket_id).then(a.as_of.cmp(&b.as_of)));

        let mut data = TrainingData {
            ids: Vec::with_capacity(order.len()),
            values: Vec::with_capacity(order.len() * schema.len()),
            labels: Vec::with_capacity(order.len()),
            latest: first.as_of,
            schema,
        };
        for fv in order {
            if !fv.names().eq(data.schema.iter().map(String::as_str)) {
                return Err(ForestError::SchemaMismatch {
                    expected: data.schema.clone(),
                    found: fv.names().map(str::to_string).collect(),
                });
            }
            let label = fv.label.ok_or_else(|| ForestError::MissingLabel(fv.ticket_id.clone()))?;
            data.ids.push(fv.ticket_id.clone());
            data.values.extend(fv.values.values());
            data.labels.push(label);
            data.latest = data.latest.max(fv.as_of);
        }
        Ok(data)
    }

    /// Builds data from raw rows that are already in canonical order.
    pub fn from_columns(schema: Vec<String>, rows: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self, ForestError> {
        if rows.is_empty() {
            return Err(ForestError::EmptyData);
        }
        if rows.len() != labels.len() {
            return Err(ForestError::InvalidConfig("row and label counts differ".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * schema.len());
        for row in &rows {
            if row.len() != schema.len() {
                return Err(ForestError::SchemaMismatch {
                    expected: schema.clone(),
                    found: (0..row.len()).map(|i| format!("#{i}")).collect(),
                });
            }
            values.extend(row);
        }
        Ok(TrainingData {
            ids: (0..rows.len()).map(|i| format!("{i:08}")).collect(),
            values,
            labels,
            latest: DateTime::<Utc>::UNIX_EPOCH,
            schema,
        })
    }

    pub fn from_rows(schema: Vec<String>, rows: &[LabeledRow]) -> Result<Self, ForestError> {
        Self::from_columns(
            schema,
            rows.iter().map(|r| r.values.clone()).collect(),
            rows.iter().map(|r| r.label).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let m = self.n_features();
        &self.values[r * m..(r + 1) * m]
    }

    fn value(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.schema.len() + feature]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub config: TrainConfig,
    pub feature_schema: Vec<String>,
    /// Content hash over trees, config and schema.
    pub model_version: String,
    /// Latest `as_of` among the training rows.
    pub trained_at: Timestamp,
}

#[derive(Serialize)]
struct VersionInput<'a> {
    format_version: u32,
    config: &'a TrainConfig,
    feature_schema: &'a [String],
    trees: &'a [DecisionTree],
}

pub fn content_version(config: &TrainConfig, schema: &[String], trees: &[DecisionTree]) -> String {
    let input = VersionInput {
        format_version: MODEL_FORMAT_VERSION,
        config,
        feature_schema: schema,
        trees,
    };
    let bytes = serde_json::to_vec(&input).expect("model serializes");
    let digest = Sha256::digest(&bytes);
    format!("rf-{}", &hex::encode(digest)[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Serial,
    /// One rayon task per tree.
    PerTree,
}

fn grow_one(data: &TrainingData, config: &TrainConfig, tree_index: usize) -> DecisionTree {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(tree_index as u64);
    let n = data.len();
    let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let params = tree::GrowParams {
        max_depth: config.max_depth,
        min_samples_leaf: config.min_samples_leaf,
        features_per_split: config.features_per_split.expect("resolved config"),
    };
    tree::grow_tree(data, sample, &params, &mut rng)
}

pub fn fit(data: &TrainingData, config: &TrainConfig, parallelism: Parallelism) -> Result<ForestModel, ForestError> {
    if data.is_empty() {
        return Err(ForestError::EmptyData);
    }
    let positives = data.labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == data.len() {
        return Err(ForestError::DegenerateLabels);
    }
    let config = config.resolve(data.n_features())?;
    let trees: Vec<DecisionTree> = match parallelism {
        Parallelism::Serial => (0..config.n_trees).map(|t| grow_one(data, &config, t)).collect(),
        Parallelism::PerTree => (0..config.n_trees)
            .into_par_iter()
            .map(|t| grow_one(data, &config, t))
            .collect(),
    };
    let model_version = content_version(&config, &data.schema, &trees);
    Ok(ForestModel {
        trees,
        config,
        feature_schema: data.schema.clone(),
        model_version,
        trained_at: data.latest,
    })
}

/// Trains on labeled feature vectors, one rayon task per tree.
pub fn train_forest(data: &[FeatureVector], config: &TrainConfig) -> Result<ForestModel, ForestError> {
    fit(&TrainingData::from_vectors(data)?, config, Parallelism::PerTree)
}

pub fn train_forest_serial(data: &[FeatureVector], config: &TrainConfig) -> Result<ForestModel, ForestError> {
    fit(&TrainingData::from_vectors(data)?, config, Parallelism::Serial)
}

impl ForestModel {
    /// Soft vote: mean positive fraction of the leaves `values` reaches.
    pub fn predict_values(&self, values: &[f64]) -> Result<f64, ForestError> {
        if values.len() != self.feature_schema.len() {
            return Err(ForestError::SchemaMismatch {
                expected: self.feature_schema.clone(),
                found: (0..values.len()).map(|i| format!("#{i}")).collect(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.leaf_fraction(values)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    pub fn check_schema(&self, names: &[String]) -> Result<(), ForestError> {
        if names == self.feature_schema.as_slice() {
            Ok(())
        } else {
            Err(ForestError::SchemaMismatch {
                expected: self.feature_schema.clone(),
                found: names.to_vec(),
            })
        }
    }
}

/// Escalation risk in `[0, 1]` for one feature vector.
pub fn predict_risk(model: &ForestModel, fv: &FeatureVector) -> Result<f64, ForestError> {
    if !fv.names().eq(model.feature_schema.iter().map(String::as_str)) {
        return Err(ForestError::SchemaMismatch {
            expected: model.feature_schema.clone(),
            found: fv.names().map(str::to_string).collect(),
        });
    }
    model.predict_values(&fv.dense())
}

/// Mean decrease in Gini impurity per feature, normalized to sum to one.
/// Empty when no tree has a split.
pub fn feature_importance(model: &ForestModel) -> IndexMap<String, f64> {
    let mut totals = vec![0.0; model.feature_schema.len()];
    for tree in &model.trees {
        for node in &tree.nodes {
            if let Node::Split {
                feature,
                left,
                right,
                positive_count,
                total_count,
                ..
            } = *node
            {
                let (lp, lt) = tree.nodes[left].counts();
                let (rp, rt) = tree.nodes[right].counts();
                let decrease = total_count as f64 * split::gini_counts(positive_count, total_count)
                    - lt as f64 * split::gini_counts(lp, lt)
                    - rt as f64 * split::gini_counts(rp, rt);
                totals[feature] += decrease.max(0.0);
            }
        }
    }
    let sum: f64 = totals.iter().sum();
    if sum <= 0.0 {
        return IndexMap::new();
    }
    model
        .feature_schema
        .iter()
        .cloned()
        .zip(totals.into_iter().map(|t| t / sum))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::ts;

    fn fv(id: &str, values: &[(&str, f64)], label: Option<bool>) -> FeatureVector {
        FeatureVector {
            ticket_id: id.into(),
            as_of: ts("2017-03-01T00:00:00Z"),
            values: values.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            label,
        }
    }

    /// 40 rows; label = x + y > 10 with a margin around the boundary.
    fn separable() -> Vec<FeatureVector> {
        (0..40)
            .map(|i| {
                let x = (i % 10) as f64;
                let y = (i / 10) as f64 * 2.0;
                let label = x + y > 8.5;
                let x = if label { x + 3.0 } else { x };
                fv(&format!("S{i:02}"), &[("x", x), ("y", y), ("noise", ((i * 7) % 5) as f64)], Some(label))
            })
            .collect()
    }

    #[test]
    fn trains_requested_number_of_trees() {
        let config = TrainConfig { n_trees: 7, ..TrainConfig::default() };
        let model = train_forest(&separable(), &config).unwrap();
        assert_eq!(model.trees.len(), 7);
        assert_eq!(model.config.features_per_split, Some(2));
    }

    #[test]
    fn training_is_deterministic_and_order_free() {
        let config = TrainConfig { n_trees: 15, ..TrainConfig::default() };
        let a = train_forest(&separable(), &config).unwrap();
        let b = train_forest_serial(&separable(), &config).unwrap();
        let mut reversed = separable();
        reversed.reverse();
        let c = train_forest(&reversed, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model_version, c.model_version);
        let other = train_forest(&separable(), &TrainConfig { seed: 7, ..config }).unwrap();
        assert_ne!(a.model_version, other.model_version);
    }

    #[test]
    fn separable_fixture_is_memorized() {
        let data = separable();
        let model = train_forest(&data, &TrainConfig::default()).unwrap();
        let correct = data
            .iter()
            .filter(|v| (predict_risk(&model, v).unwrap() >= 0.5) == v.label.unwrap())
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn single_class_data_is_degenerate() {
        let data: Vec<_> = separable()
            .into_iter()
            .map(|mut v| {
                v.label = Some(false);
                v
            })
            .collect();
        assert_eq!(train_forest(&data, &TrainConfig::default()), Err(ForestError::DegenerateLabels));
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let mut data = separable();
        data[3] = fv("S03", &[("x", 1.0), ("z", 2.0), ("noise", 0.0)], Some(true));
        assert!(matches!(
            train_forest(&data, &TrainConfig::default()),
            Err(ForestError::SchemaMismatch { .. })
        ));
        let model = train_forest(&separable(), &TrainConfig { n_trees: 3, ..Default::default() }).unwrap();
        let wrong = fv("Q", &[("x", 1.0), ("y", 2.0)], None);
        assert!(matches!(predict_risk(&model, &wrong), Err(ForestError::SchemaMismatch { .. })));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let data = separable();
        for config in [
            TrainConfig { n_trees: 0, ..Default::default() },
            TrainConfig { max_depth: 0, ..Default::default() },
            TrainConfig { min_samples_leaf: 0, ..Default::default() },
            TrainConfig { features_per_split: Some(4), ..Default::default() },
            TrainConfig { features_per_split: Some(0), ..Default::default() },
        ] {
            assert!(matches!(train_forest(&data, &config), Err(ForestError::InvalidConfig(_))));
        }
    }

    #[test]
    fn pure_positive_leaves_give_full_risk() {
        let data: Vec<_> = (0..20)
            .map(|i| fv(&format!("P{i:02}"), &[("x", i as f64)], Some(i >= 10)))
            .collect();
        let model = train_forest(&data, &TrainConfig { n_trees: 25, ..Default::default() }).unwrap();
        let deep_positive = fv("Q", &[("x", 100.0)], None);
        let deep_negative = fv("Q", &[("x", -100.0)], None);
        assert_eq!(predict_risk(&model, &deep_positive).unwrap(), 1.0);
        assert_eq!(predict_risk(&model, &deep_negative).unwrap(), 0.0);
    }

    #[test]
    fn risk_is_mean_of_tree_leaf_fractions() {
        let config = TrainConfig {
            n_trees: 3,
            max_depth: 2,
            min_samples_leaf: 3,
            features_per_split: Some(1),
            seed: 5,
        };
        let data = separable();
        let model = train_forest(&data, &config).unwrap();
        for v in data.iter().take(10) {
            let values = v.dense();
            let by_hand: Vec<f64> = model
                .trees
                .iter()
                .map(|t| {
                    let mut at = t.root;
                    while let Node::Split { feature, threshold, left, right, .. } = t.nodes[at] {
                        at = if values[feature] <= threshold { left } else { right };
                    }
                    let (p, n) = t.nodes[at].counts();
                    p as f64 / n as f64
                })
                .collect();
            let expected = (by_hand[0] + by_hand[1] + by_hand[2]) / 3.0;
            assert_eq!(predict_risk(&model, v).unwrap(), expected);
        }
    }

    #[test]
    fn importance_of_single_separating_feature() {
        let data: Vec<_> = (0..20)
            .map(|i| fv(&format!("P{i:02}"), &[("signal", i as f64), ("flat", 1.0)], Some(i >= 10)))
            .collect();
        let model = train_forest(&data, &TrainConfig { n_trees: 10, ..Default::default() }).unwrap();
        let imp = feature_importance(&model);
        assert_eq!(imp["signal"], 1.0);
        assert_eq!(imp["flat"], 0.0);
    }

    #[test]
    fn importance_normalizes_or_is_empty() {
        let model = train_forest(&separable(), &TrainConfig { n_trees: 20, ..Default::default() }).unwrap();
        let imp = feature_importance(&model);
        assert!((imp.values().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(imp.values().all(|&v| v >= 0.0));

        let mut stumps = model.clone();
        for t in &mut stumps.trees {
            t.nodes = vec![Node::Leaf { positive_count: 1, total_count: 2 }];
            t.root = 0;
        }
        assert!(feature_importance(&stumps).is_empty());
    }
}
