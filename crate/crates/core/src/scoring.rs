//! Periodic re-scoring of open tickets, risk deltas between runs, and the
//! transparent heuristic estimate shown next to the model's prediction.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    standard_feature_names, FeatureError, FeatureExtractor, FeatureVector, CURRENT_SEVERITY,
    CUSTOMER_ESCALATION_RATE, DAYS_OPEN, NUM_SEVERITY_INCREASES,
};
use crate::forest::{ForestError, ForestModel};
use crate::ingestion::RepositorySnapshot;
use crate::model::{timestamp, TicketState, Timestamp};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error(transparent)]
    Model(#[from] ForestError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("invalid risk snapshot on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSnapshot {
    pub ticket_id: String,
    #[serde(with = "timestamp")]
    pub scored_at: Timestamp,
    pub risk: f64,
    pub estimated_risk: f64,
    pub previous_risk: Option<f64>,
    pub delta: Option<f64>,
    pub model_version: String,
    pub features: FeatureVector,
}

/// Heuristic weights: logit = BIAS + sum(weight * normalized input).
pub const ESTIMATE_BIAS: f64 = -2.5;
pub const ESTIMATE_WEIGHT_CUSTOMER_RATE: f64 = 2.0;
pub const ESTIMATE_WEIGHT_SEVERITY: f64 = 1.5;
pub const ESTIMATE_WEIGHT_DAYS_OPEN: f64 = 1.5;
pub const ESTIMATE_WEIGHT_SEVERITY_INCREASES: f64 = 1.5;
pub const ESTIMATE_DAYS_OPEN_CAP: f64 = 90.0;
pub const ESTIMATE_SEVERITY_INCREASES_CAP: f64 = 3.0;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Estimate for a vector whose inputs are all zero.
pub fn estimate_baseline() -> f64 {
    logistic(ESTIMATE_BIAS)
}

/// Fixed-weight logistic over four normalized inputs, each mapped onto
/// `[0, 1]`: customer escalation rate, inverted severity (`(4 - s) / 3`;
/// severities outside 1-4 contribute nothing), days open capped at 90 and
/// severity increases capped at 3. Missing features read as zero.
pub fn estimate_risk(fv: &FeatureVector) -> f64 {
    let get = |name| fv.get(name).unwrap_or(0.0);
    let rate = get(CUSTOMER_ESCALATION_RATE).clamp(0.0, 1.0);
    let severity = get(CURRENT_SEVERITY);
    let severity = if (1.0..=4.0).contains(&severity) {
        (4.0 - severity) / 3.0
    } else {
        0.0
    };
    let days = get(DAYS_OPEN).clamp(0.0, ESTIMATE_DAYS_OPEN_CAP) / ESTIMATE_DAYS_OPEN_CAP;
    let increases = get(NUM_SEVERITY_INCREASES).clamp(0.0, ESTIMATE_SEVERITY_INCREASES_CAP)
        / ESTIMATE_SEVERITY_INCREASES_CAP;
    logistic(
        ESTIMATE_BIAS
            + ESTIMATE_WEIGHT_CUSTOMER_RATE * rate
            + ESTIMATE_WEIGHT_SEVERITY * severity
            + ESTIMATE_WEIGHT_DAYS_OPEN * days
            + ESTIMATE_WEIGHT_SEVERITY_INCREASES * increases,
    )
}

/// Latest prior risk per ticket. Later entries win ties on `scored_at`.
pub fn latest_risks(history: &[RiskSnapshot]) -> HashMap<&str, &RiskSnapshot> {
    let mut latest: HashMap<&str, &RiskSnapshot> = HashMap::new();
    for snap in history {
        match latest.get(snap.ticket_id.as_str()) {
            Some(prev) if prev.scored_at > snap.scored_at => {}
            _ => {
                latest.insert(&snap.ticket_id, snap);
            }
        }
    }
    latest
}

/// Scores every ticket open at `as_of`, ordered by ticket_id.
pub fn score_all(
    model: &ForestModel,
    snapshot: &RepositorySnapshot,
    history: &[RiskSnapshot],
    as_of: Timestamp,
) -> Result<Vec<RiskSnapshot>, ScoringError> {
    model.check_schema(&standard_feature_names())?;
    let extractor = FeatureExtractor::new(snapshot);
    let previous = latest_risks(history);
    let mut out = Vec::new();
    for ticket in snapshot.tickets.values() {
        if ticket.created_at > as_of || ticket.replay_at(as_of).state != TicketState::Open {
            continue;
        }
        let features = extractor.ticket_features(ticket, as_of)?;
        let risk = model.predict_values(&features.dense())?;
        let previous_risk = previous.get(ticket.ticket_id.as_str()).map(|s| s.risk);
        out.push(RiskSnapshot {
            ticket_id: ticket.ticket_id.clone(),
            scored_at: as_of,
            risk,
            estimated_risk: estimate_risk(&features),
            previous_risk,
            delta: previous_risk.map(|p| risk - p),
            model_version: model.model_version.clone(),
            features,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    #[serde(with = "timestamp")]
    pub scored_at: Timestamp,
    pub risk: f64,
    pub estimated_risk: f64,
}

/// Risk over time for one ticket, ascending by `scored_at` (stable for
/// equal instants).
pub fn risk_history(ticket_id: &str, history: &[RiskSnapshot]) -> Vec<RiskPoint> {
    let mut points: Vec<RiskPoint> = history
        .iter()
        .filter(|s| s.ticket_id == ticket_id)
        .map(|s| RiskPoint {
            scored_at: s.scored_at,
            risk: s.risk,
            estimated_risk: s.estimated_risk,
        })
        .collect();
    points.sort_by_key(|p| p.scored_at);
    points
}

pub fn write_snapshots(snapshots: &[RiskSnapshot], mut out: impl Write) -> io::Result<()> {
    for s in snapshots {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_snapshots(reader: impl BufRead) -> Result<Vec<RiskSnapshot>, ScoringError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ScoringError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::build_training_set;
    use crate::forest::{train_forest, TrainConfig};
    use crate::ingestion::{generate_mock_repository, MockConfig};
    use crate::model::fixtures::ts;
    use indexmap::IndexMap;

    fn vector(values: &[(&str, f64)]) -> FeatureVector {
        let mut map: IndexMap<String, f64> = standard_feature_names().into_iter().map(|n| (n, 0.0)).collect();
        for &(k, v) in values {
            map.insert(k.to_string(), v);
        }
        FeatureVector {
            ticket_id: "T".into(),
            as_of: ts("2017-01-01T00:00:00Z"),
            values: map,
            label: None,
        }
    }

    fn fixture() -> (ForestModel, RepositorySnapshot) {
        let repo = generate_mock_repository(&MockConfig {
            seed: 3,
            n_customers: 20,
            n_tickets: 300,
            horizon_days: 120,
            base_escalation_rate: 0.3,
        })
        .unwrap();
        let model = train_forest(
            &build_training_set(&repo).unwrap(),
            &TrainConfig { n_trees: 10, ..Default::default() },
        )
        .unwrap();
        (model, repo)
    }

    #[test]
    fn all_zero_vector_gives_bias_baseline() {
        let e = estimate_risk(&vector(&[]));
        assert_eq!(e, estimate_baseline());
        assert!((e - 1.0 / (1.0 + 2.5f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn worst_case_estimate_is_high() {
        let e = estimate_risk(&vector(&[
            (CUSTOMER_ESCALATION_RATE, 1.0),
            (CURRENT_SEVERITY, 1.0),
            (DAYS_OPEN, 120.0),
            (NUM_SEVERITY_INCREASES, 5.0),
        ]));
        // logit = -2.5 + 2.0 + 1.5 + 1.5 + 1.5 = 4.0
        assert!((e - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-15);
        assert!(e >= 0.9);
    }

    #[test]
    fn estimate_grows_with_customer_rate() {
        let mut last = 0.0;
        for i in 0..=10 {
            let e = estimate_risk(&vector(&[(CUSTOMER_ESCALATION_RATE, i as f64 / 10.0), (CURRENT_SEVERITY, 3.0)]));
            assert!(e >= last);
            last = e;
        }
    }

    #[test]
    fn first_run_has_no_deltas() {
        let (model, repo) = fixture();
        let run = score_all(&model, &repo, &[], repo.loaded_at).unwrap();
        assert_eq!(run.len(), repo.open_tickets().count());
        assert!(!run.is_empty());
        for s in &run {
            assert_eq!((s.previous_risk, s.delta), (None, None));
            assert_eq!(s.features.as_of, s.scored_at);
            assert!((0.0..=1.0).contains(&s.risk));
            assert_eq!(repo.get(&s.ticket_id).unwrap().state, TicketState::Open);
        }
    }

    #[test]
    fn delta_against_previous_run() {
        let (model, repo) = fixture();
        let first = score_all(&model, &repo, &[], repo.loaded_at).unwrap();
        let mut prior = first.clone();
        prior[0].risk = 0.40;
        let mut later = first[0].clone();
        later.risk = 0.65;
        let target = &first[0].ticket_id;
        let latest = latest_risks(std::slice::from_ref(&later));
        assert_eq!(latest[target.as_str()].risk, 0.65);

        let second = score_all(&model, &repo, &prior, repo.loaded_at).unwrap();
        let s = second.iter().find(|s| &s.ticket_id == target).unwrap();
        assert_eq!(s.previous_risk, Some(0.40));
        assert_eq!(s.delta, Some(s.risk - 0.40));
        // frozen time, same model: every other delta is exactly zero
        for s in second.iter().filter(|s| &s.ticket_id != target) {
            assert_eq!(s.delta, Some(0.0));
        }
        assert_eq!(second, score_all(&model, &repo, &prior, repo.loaded_at).unwrap());
    }

    #[test]
    fn two_run_fixture_delta() {
        use crate::forest::{content_version, DecisionTree, Node};
        // one leaf with 13 of 20 positive: every ticket scores 0.65
        let trees = vec![DecisionTree {
            nodes: vec![Node::Leaf { positive_count: 13, total_count: 20 }],
            root: 0,
        }];
        let config = TrainConfig { n_trees: 1, features_per_split: Some(4), ..Default::default() };
        let schema = standard_feature_names();
        let model = ForestModel {
            model_version: content_version(&config, &schema, &trees),
            trees,
            config,
            feature_schema: schema,
            trained_at: ts("2017-01-01T00:00:00Z"),
        };
        let (_, repo) = fixture();
        let mut prior = score_all(&model, &repo, &[], repo.loaded_at).unwrap();
        assert_eq!(prior[0].risk, 0.65);
        prior[0].risk = 0.40;
        let second = score_all(&model, &repo, &prior[..1], repo.loaded_at).unwrap();
        assert_eq!(second[0].previous_risk, Some(0.40));
        assert!((second[0].delta.unwrap() - 0.25).abs() < 1e-12);
        assert!(second[1..].iter().all(|s| s.delta.is_none()));
    }

    #[test]
    fn schema_mismatch_is_an_error() {
        let (mut model, repo) = fixture();
        model.feature_schema.swap(0, 1);
        assert!(matches!(
            score_all(&model, &repo, &[], repo.loaded_at),
            Err(ScoringError::Model(ForestError::SchemaMismatch { .. }))
        ));
    }

    #[test]
    fn history_is_time_ordered() {
        let (model, repo) = fixture();
        assert!(risk_history("nope", &[]).is_empty());
        let t0 = repo.loaded_at;
        let mut history = Vec::new();
        for h in [0, 6, 12] {
            let run = score_all(&model, &repo, &history, t0 + chrono::Duration::hours(h)).unwrap();
            history.extend(run);
        }
        let id = history[0].ticket_id.clone();
        let points = risk_history(&id, &history);
        assert_eq!(points.len(), 3);
        assert!(points.windows(2).all(|w| w[0].scored_at < w[1].scored_at));
        let stored: Vec<_> = history.iter().filter(|s| s.ticket_id == id).collect();
        for (w, later) in points.windows(2).zip(stored.iter().skip(1)) {
            assert_eq!(w[1].risk - w[0].risk, later.delta.unwrap());
        }
    }

    #[test]
    fn snapshot_file_round_trip() {
        let (model, repo) = fixture();
        let run = score_all(&model, &repo, &[], repo.loaded_at).unwrap();
        let mut buf = Vec::new();
        write_snapshots(&run, &mut buf).unwrap();
        let back = read_snapshots(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, run);
        assert!(matches!(
            read_snapshots(std::io::Cursor::new("{}\n")),
            Err(ScoringError::Parse { line: 1, .. })
        ));
    }
}
