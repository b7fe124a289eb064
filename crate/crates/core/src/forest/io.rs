//! Model file: one JSON document holding the format tag, schema, resolved
//! config and every tree's node arena. `model_version` is recomputed on load
//! and must match the stored value.

use serde::{Deserialize, Serialize};

use super::{content_version, DecisionTree, ForestError, ForestModel, Node, TrainConfig};
use crate::model::{timestamp, Timestamp};

pub const MODEL_FORMAT: &str = "escalate-forest";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    format_version: u32,
    model_version: String,
    #[serde(with = "timestamp")]
    trained_at: Timestamp,
    config: TrainConfig,
    feature_schema: Vec<String>,
    trees: Vec<DecisionTree>,
}

pub fn serialize_model(model: &ForestModel) -> Vec<u8> {
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        format_version: MODEL_FORMAT_VERSION,
        model_version: model.model_version.clone(),
        trained_at: model.trained_at,
        config: model.config.clone(),
        feature_schema: model.feature_schema.clone(),
        trees: model.trees.clone(),
    };
    let mut bytes = serde_json::to_vec(&file).expect("model serializes");
    bytes.push(b'\n');
    bytes
}

/// Offset just past the byte serde_json stopped at.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let line_start: usize = bytes
        .split(|&b| b == b'\n')
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum();
    (line_start + column).min(bytes.len())
}

pub fn deserialize_model(bytes: &[u8]) -> Result<ForestModel, ForestError> {
    let file: ModelFile = serde_json::from_slice(bytes).map_err(|e| ForestError::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.format != MODEL_FORMAT {
        return Err(ForestError::Corrupt(format!("unknown format {:?}", file.format)));
    }
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(ForestError::Corrupt(format!(
            "unsupported format_version {}",
            file.format_version
        )));
    }
    if file.trees.is_empty() {
        return Err(ForestError::Corrupt("model has no trees".into()));
    }
    for (t, tree) in file.trees.iter().enumerate() {
        check_tree(tree, file.feature_schema.len()).map_err(|m| ForestError::Corrupt(format!("tree {t}: {m}")))?;
    }
    let recomputed = content_version(&file.config, &file.feature_schema, &file.trees);
    if recomputed != file.model_version {
        return Err(ForestError::Corrupt(format!(
            "model_version {} does not match content hash {recomputed}",
            file.model_version
        )));
    }
    Ok(ForestModel {
        trees: file.trees,
        config: file.config,
        feature_schema: file.feature_schema,
        model_version: file.model_version,
        trained_at: file.trained_at,
    })
}

fn check_tree(tree: &DecisionTree, n_features: usize) -> Result<(), String> {
    if tree.root >= tree.nodes.len() {
        return Err("root out of range".into());
    }
    for (i, node) in tree.nodes.iter().enumerate() {
        match *node {
            Node::Split {
                feature,
                left,
                right,
                threshold,
                ..
            } => {
                if feature >= n_features {
                    return Err(format!("node {i} uses feature {feature} beyond schema"));
                }
                // children after parents rules out cycles
                if left <= i || right <= i || left >= tree.nodes.len() || right >= tree.nodes.len() {
                    return Err(format!("node {i} has invalid children"));
                }
                if !threshold.is_finite() {
                    return Err(format!("node {i} has non-finite threshold"));
                }
            }
            Node::Leaf {
                positive_count,
                total_count,
            } => {
                if total_count == 0 || positive_count > total_count {
                    return Err(format!("leaf {i} has invalid counts"));
                }
            }
        }
    }
    Ok(())
}
