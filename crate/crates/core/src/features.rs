//! Feature mining: customer profiles aggregated across a customer's other
//! tickets, and the fixed twelve-feature vector describing one ticket as of
//! an instant.
//!
//! Every feature is computed only from events at or before `as_of`, so a
//! vector never depends on anything that happened later.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingestion::RepositorySnapshot;
use crate::model::{days_between, timestamp, EventKind, TicketRecord, TicketState, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("as_of {as_of} precedes creation of ticket {ticket_id}")]
    BeforeCreation { ticket_id: String, as_of: String },
    #[error("snapshot is empty")]
    EmptySnapshot,
    #[error("no closed or escalated tickets to learn from")]
    NoClosedTickets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureCategory {
    BasicAttributes,
    CustomerProfile,
    TicketHistory,
    SupportActivity,
}

impl FeatureCategory {
    pub const ALL: [FeatureCategory; 4] = [
        FeatureCategory::BasicAttributes,
        FeatureCategory::CustomerProfile,
        FeatureCategory::TicketHistory,
        FeatureCategory::SupportActivity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureCategory::BasicAttributes => "basic_attributes",
            FeatureCategory::CustomerProfile => "customer_profile",
            FeatureCategory::TicketHistory => "ticket_history",
            FeatureCategory::SupportActivity => "support_activity",
        }
    }
}

pub const CURRENT_SEVERITY: &str = "current_severity";
pub const INITIAL_SEVERITY: &str = "initial_severity";
pub const PRODUCT_TICKET_VOLUME: &str = "product_ticket_volume";
pub const CUSTOMER_TOTAL_TICKETS: &str = "customer_total_tickets";
pub const CUSTOMER_ESCALATION_RATE: &str = "customer_escalation_rate";
pub const CUSTOMER_OPEN_TICKETS: &str = "customer_open_tickets";
pub const CUSTOMER_MEAN_DAYS_OPEN: &str = "customer_mean_days_open";
pub const DAYS_OPEN: &str = "days_open";
pub const NUM_EVENTS: &str = "num_events";
pub const DAYS_SINCE_LAST_UPDATE: &str = "days_since_last_update";
pub const NUM_OWNER_CHANGES: &str = "num_owner_changes";
pub const NUM_SEVERITY_INCREASES: &str = "num_severity_increases";

const STANDARD_FEATURES: [(&str, FeatureCategory); 12] = [
    (CURRENT_SEVERITY, FeatureCategory::BasicAttributes),
    (INITIAL_SEVERITY, FeatureCategory::BasicAttributes),
    (PRODUCT_TICKET_VOLUME, FeatureCategory::BasicAttributes),
    (CUSTOMER_TOTAL_TICKETS, FeatureCategory::CustomerProfile),
    (CUSTOMER_ESCALATION_RATE, FeatureCategory::CustomerProfile),
    (CUSTOMER_OPEN_TICKETS, FeatureCategory::CustomerProfile),
    (CUSTOMER_MEAN_DAYS_OPEN, FeatureCategory::CustomerProfile),
    (DAYS_OPEN, FeatureCategory::TicketHistory),
    (NUM_EVENTS, FeatureCategory::TicketHistory),
    (DAYS_SINCE_LAST_UPDATE, FeatureCategory::TicketHistory),
    (NUM_OWNER_CHANGES, FeatureCategory::SupportActivity),
    (NUM_SEVERITY_INCREASES, FeatureCategory::SupportActivity),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub category: FeatureCategory,
}

/// Ordered feature names with their category tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn standard() -> Self {
        FeatureSchema {
            features: STANDARD_FEATURES
                .iter()
                .map(|&(name, category)| FeatureSpec {
                    name: name.to_string(),
                    category,
                })
                .collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn category_of(&self, name: &str) -> Option<FeatureCategory> {
        self.features.iter().find(|f| f.name == name).map(|f| f.category)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }
}

pub fn standard_feature_names() -> Vec<String> {
    FeatureSchema::standard().names()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub ticket_id: String,
    #[serde(with = "timestamp")]
    pub as_of: Timestamp,
    pub values: IndexMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn dense(&self) -> Vec<f64> {
        self.values.values().copied().collect()
    }

    /// Values grouped by category, in schema order within each group.
    pub fn grouped(&self, schema: &FeatureSchema) -> Vec<(FeatureCategory, Vec<(String, f64)>)> {
        FeatureCategory::ALL
            .iter()
            .map(|&cat| {
                let members = schema
                    .features
                    .iter()
                    .filter(|f| f.category == cat)
                    .filter_map(|f| self.get(&f.name).map(|v| (f.name.clone(), v)))
                    .collect();
                (cat, members)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerProfile {
    pub customer_id: String,
    #[serde(with = "timestamp")]
    pub as_of: Timestamp,
    pub total_tickets: usize,
    /// Includes escalated tickets.
    pub closed_tickets: usize,
    pub escalated_tickets: usize,
    pub open_tickets: usize,
    pub escalation_rate: f64,
    pub mean_days_open_closed: f64,
}

impl CustomerProfile {
    fn empty(customer_id: &str, as_of: Timestamp) -> Self {
        CustomerProfile {
            customer_id: customer_id.to_string(),
            as_of,
            total_tickets: 0,
            closed_tickets: 0,
            escalated_tickets: 0,
            open_tickets: 0,
            escalation_rate: 0.0,
            mean_days_open_closed: 0.0,
        }
    }
}

fn profile_over<'a>(
    customer_id: &str,
    tickets: impl Iterator<Item = &'a TicketRecord>,
    as_of: Timestamp,
    exclude: Option<&str>,
) -> CustomerProfile {
    let mut profile = CustomerProfile::empty(customer_id, as_of);
    let mut days_sum = 0.0;
    for t in tickets {
        if t.customer_id != customer_id || t.created_at > as_of || Some(t.ticket_id.as_str()) == exclude {
            continue;
        }
        profile.total_tickets += 1;
        let replay = t.replay_at(as_of);
        match (replay.state, replay.terminal_since) {
            (state, Some(since)) if state.is_terminal() => {
                profile.closed_tickets += 1;
                if state == TicketState::Escalated {
                    profile.escalated_tickets += 1;
                }
                days_sum += days_between(t.created_at, since);
            }
            _ => profile.open_tickets += 1,
        }
    }
    if profile.closed_tickets > 0 {
        profile.escalation_rate = profile.escalated_tickets as f64 / profile.closed_tickets as f64;
        profile.mean_days_open_closed = days_sum / profile.closed_tickets as f64;
    }
    profile
}

/// Aggregates a customer's tickets as they stood at `as_of`. `exclude` drops
/// one ticket (normally the one being scored) from the history. Unknown
/// customers get an all-zero profile.
pub fn customer_profile(
    customer_id: &str,
    snapshot: &RepositorySnapshot,
    as_of: Timestamp,
    exclude: Option<&str>,
) -> CustomerProfile {
    profile_over(customer_id, snapshot.tickets.values(), as_of, exclude)
}

/// Per-snapshot indexes that make repeated feature extraction cheap.
pub struct FeatureExtractor<'a> {
    by_customer: HashMap<&'a str, Vec<&'a TicketRecord>>,
    by_product: HashMap<&'a str, Vec<&'a TicketRecord>>,
    schema: FeatureSchema,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(snapshot: &'a RepositorySnapshot) -> Self {
        let mut by_customer: HashMap<&str, Vec<&TicketRecord>> = HashMap::new();
        let mut by_product: HashMap<&str, Vec<&TicketRecord>> = HashMap::new();
        for t in snapshot.tickets.values() {
            by_customer.entry(t.customer_id.as_str()).or_default().push(t);
            by_product.entry(t.product.as_str()).or_default().push(t);
        }
        FeatureExtractor {
            by_customer,
            by_product,
            schema: FeatureSchema::standard(),
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn customer_profile(&self, customer_id: &str, as_of: Timestamp, exclude: Option<&str>) -> CustomerProfile {
        match self.by_customer.get(customer_id) {
            Some(tickets) => profile_over(customer_id, tickets.iter().copied(), as_of, exclude),
            None => CustomerProfile::empty(customer_id, as_of),
        }
    }

    pub fn ticket_features(&self, ticket: &TicketRecord, as_of: Timestamp) -> Result<FeatureVector, FeatureError> {
        if as_of < ticket.created_at {
            return Err(FeatureError::BeforeCreation {
                ticket_id: ticket.ticket_id.clone(),
                as_of: timestamp::format(&as_of),
            });
        }
        let replay = ticket.replay_at(as_of);
        let profile = self.customer_profile(&ticket.customer_id, as_of, Some(&ticket.ticket_id));
        let product_volume = self
            .by_product
            .get(ticket.product.as_str())
            .map(|ts| {
                ts.iter()
                    .filter(|t| t.ticket_id != ticket.ticket_id && t.created_at <= as_of)
                    .count()
            })
            .unwrap_or(0);

        let (mut updates, mut owner_changes, mut severity_increases) = (0usize, 0usize, 0usize);
        let mut last_update = ticket.created_at;
        for event in ticket.events_until(as_of) {
            last_update = event.timestamp;
            match event.kind {
                EventKind::Created => continue,
                EventKind::OwnerChange => owner_changes += 1,
                EventKind::SeverityChange => {
                    if matches!(event.severity_transition(), Some((old, new)) if new < old) {
                        severity_increases += 1;
                    }
                }
                _ => {}
            }
            updates += 1;
        }

        let values: IndexMap<String, f64> = [
            (CURRENT_SEVERITY, replay.severity as f64),
            (INITIAL_SEVERITY, ticket.initial_severity() as f64),
            (PRODUCT_TICKET_VOLUME, product_volume as f64),
            (CUSTOMER_TOTAL_TICKETS, profile.total_tickets as f64),
            (CUSTOMER_ESCALATION_RATE, profile.escalation_rate),
            (CUSTOMER_OPEN_TICKETS, profile.open_tickets as f64),
            (CUSTOMER_MEAN_DAYS_OPEN, profile.mean_days_open_closed),
            (DAYS_OPEN, days_between(ticket.created_at, as_of)),
            (NUM_EVENTS, updates as f64),
            (DAYS_SINCE_LAST_UPDATE, days_between(last_update, as_of)),
            (NUM_OWNER_CHANGES, owner_changes as f64),
            (NUM_SEVERITY_INCREASES, severity_increases as f64),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        debug_assert!(values.keys().eq(STANDARD_FEATURES.iter().map(|(n, _)| n)));

        Ok(FeatureVector {
            ticket_id: ticket.ticket_id.clone(),
            as_of,
            values,
            label: None,
        })
    }

    pub fn build_training_set(&self, snapshot: &RepositorySnapshot) -> Result<Vec<FeatureVector>, FeatureError> {
        if snapshot.is_empty() {
            return Err(FeatureError::EmptySnapshot);
        }
        let mut out = Vec::new();
        for ticket in snapshot.tickets.values() {
            let Some(closed_at) = ticket.closed_at.filter(|_| ticket.state.is_terminal()) else {
                continue;
            };
            let mut fv = self.ticket_features(ticket, training_instant(ticket.created_at, closed_at))?;
            fv.label = Some(ticket.state == TicketState::Escalated);
            out.push(fv);
        }
        if out.is_empty() {
            return Err(FeatureError::NoClosedTickets);
        }
        Ok(out)
    }
}

/// Training samples are observed halfway through a ticket's life, rounded
/// down to the second.
pub fn training_instant(created_at: Timestamp, closed_at: Timestamp) -> Timestamp {
    let span = (closed_at - created_at).num_seconds();
    created_at + chrono::Duration::seconds(span / 2)
}

pub fn ticket_features(
    ticket: &TicketRecord,
    snapshot: &RepositorySnapshot,
    as_of: Timestamp,
) -> Result<FeatureVector, FeatureError> {
    FeatureExtractor::new(snapshot).ticket_features(ticket, as_of)
}

/// One labeled vector per finished ticket, ordered by ticket_id.
pub fn build_training_set(snapshot: &RepositorySnapshot) -> Result<Vec<FeatureVector>, FeatureError> {
    FeatureExtractor::new(snapshot).build_training_set(snapshot)
}
