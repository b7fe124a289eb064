//! Escalation-risk tooling for support-ticket repositories.
//!
//! The crate mines a repository of tickets into per-ticket feature vectors
//! (customer history, ticket attributes, tempo and support activity), trains a
//! random forest that predicts which open tickets are likely to escalate,
//! re-scores open tickets over time and keeps the analyst collaboration
//! records (comments, next actions, follows) that are woven into a ticket's
//! timeline.

pub mod evaluation;
pub mod features;
pub mod forest;
pub mod ingestion;
pub mod model;
pub mod scoring;
pub mod store;

pub use features::{FeatureSchema, FeatureVector};
pub use forest::{ForestModel, TrainConfig};
pub use ingestion::{MockConfig, RepositorySnapshot};
pub use model::{TicketEvent, TicketRecord, TicketState, Timestamp};
pub use scoring::RiskSnapshot;
pub use store::Store;
