//! Ticket repositories: JSON Lines loading with a rejects report, and a
//! deterministic synthetic generator used for demos and benchmarks.
//!
//! # Synthetic generator
//!
//! Every random draw comes from one `ChaCha8Rng` seeded with
//! `MockConfig::seed` via `seed_from_u64`; ChaCha8 output is specified
//! independently of platform and word size, so a config always produces the
//! same bytes.
//!
//! Each customer has a latent difficulty `d ~ U(0,1)`. Difficult customers
//! open more severe tickets, contact support more often, keep tickets open
//! longer and see more severity increases. A ticket's escalation probability is
//!
//! ```text
//! logistic( 5.0 * (4 - peak_severity) / 3
//!         + 4.0 * min(prior_escalations, 4) / 4
//!         + 8.0 * min(duration_days, 60) / 60
//!         + 5.0 * min(customer_contacts, 12) / 12
//!         + bias )
//! ```
//!
//! where `prior_escalations` counts the same customer's tickets that escalated
//! before this one was opened. `bias` is found by bisection so that the mean
//! probability over resolved tickets equals `base_escalation_rate`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_ticket, EventKind, TicketEvent, TicketRecord, TicketState, Timestamp,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("invalid mock config: {0}")]
    InvalidConfig(String),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepositorySnapshot {
    pub tickets: BTreeMap<String, TicketRecord>,
    /// Latest event instant in the repository (the data horizon).
    pub loaded_at: Timestamp,
    pub source: String,
}

impl RepositorySnapshot {
    pub fn from_tickets(tickets: impl IntoIterator<Item = TicketRecord>, source: &str) -> Self {
        let tickets: BTreeMap<_, _> = tickets
            .into_iter()
            .map(|t| (t.ticket_id.clone(), t))
            .collect();
        let loaded_at = data_horizon(tickets.values());
        RepositorySnapshot {
            tickets,
            loaded_at,
            source: source.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.tickets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tickets.is_empty()
    }

    pub fn get(&self, ticket_id: &str) -> Option<&TicketRecord> {
        self.tickets.get(ticket_id)
    }

    pub fn open_tickets(&self) -> impl Iterator<Item = &TicketRecord> {
        self.tickets.values().filter(|t| t.state == TicketState::Open)
    }
}

fn data_horizon<'a>(tickets: impl Iterator<Item = &'a TicketRecord>) -> Timestamp {
    tickets
        .filter_map(|t| t.events.last().map(|e| e.timestamp).or(Some(t.created_at)))
        .max()
        .unwrap_or(DateTime::<Utc>::UNIX_EPOCH)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line_number: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub snapshot: RepositorySnapshot,
    pub rejects: Vec<Reject>,
}

/// Loads a JSON Lines repository file. Bad lines are rejected individually.
pub fn load_repository(path: impl AsRef<Path>) -> Result<LoadReport, IngestError> {
    let path = path.as_ref();
    let io_err = |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    parse_repository(BufReader::new(file), &path.display().to_string()).map_err(io_err)
}

/// Parses repository lines from any reader. The first record with a given
/// ticket_id wins; later duplicates are rejected.
pub fn parse_repository(reader: impl BufRead, source: &str) -> io::Result<LoadReport> {
    let mut tickets = BTreeMap::new();
    let mut rejects = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_number = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: TicketRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                rejects.push(Reject {
                    line_number,
                    reason: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        let validation = validate_ticket(&record);
        if !validation.is_ok() {
            rejects.push(Reject {
                line_number,
                reason: validation.messages().join("; "),
            });
            continue;
        }
        if tickets.contains_key(&record.ticket_id) {
            rejects.push(Reject {
                line_number,
                reason: "duplicate id".into(),
            });
            continue;
        }
        tickets.insert(record.ticket_id.clone(), record);
    }
    let loaded_at = data_horizon(tickets.values());
    Ok(LoadReport {
        snapshot: RepositorySnapshot {
            tickets,
            loaded_at,
            source: source.to_string(),
        },
        rejects,
    })
}

/// Writes one ticket per line, ordered by ticket_id.
pub fn write_repository(snapshot: &RepositorySnapshot, mut out: impl Write) -> Result<(), IngestError> {
    for ticket in snapshot.tickets.values() {
        serde_json::to_writer(&mut out, ticket)?;
        out.write_all(b"\n").map_err(serde_json::Error::io)?;
    }
    Ok(())
}

pub fn serialize_repository(snapshot: &RepositorySnapshot) -> Result<Vec<u8>, IngestError> {
    let mut buf = Vec::new();
    write_repository(snapshot, &mut buf)?;
    Ok(buf)
}

pub fn write_rejects(rejects: &[Reject], mut out: impl Write) -> io::Result<()> {
    for r in rejects {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    pub seed: u64,
    pub n_customers: usize,
    pub n_tickets: usize,
    pub horizon_days: u32,
    pub base_escalation_rate: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            seed: 42,
            n_customers: 150,
            n_tickets: 2000,
            horizon_days: 365,
            base_escalation_rate: 0.3,
        }
    }
}

impl MockConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.n_customers == 0 {
            return Err(IngestError::InvalidConfig("n_customers must be positive".into()));
        }
        if self.n_tickets == 0 {
            return Err(IngestError::InvalidConfig("n_tickets must be positive".into()));
        }
        if self.horizon_days == 0 {
            return Err(IngestError::InvalidConfig("horizon_days must be positive".into()));
        }
        let r = self.base_escalation_rate;
        if !(r > 0.0 && r < 1.0) {
            return Err(IngestError::InvalidConfig(format!(
                "base_escalation_rate {r} must lie strictly between 0 and 1"
            )));
        }
        Ok(())
    }
}

/// Start of every synthetic repository.
pub fn mock_epoch() -> Timestamp {
    Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap()
}

pub const WEIGHT_SEVERITY: f64 = 5.0;
pub const WEIGHT_PRIOR_ESCALATIONS: f64 = 4.0;
pub const WEIGHT_DURATION: f64 = 8.0;
pub const WEIGHT_CONTACTS: f64 = 5.0;
const PRIOR_ESCALATIONS_CAP: f64 = 4.0;
const DURATION_CAP_DAYS: f64 = 60.0;
const CONTACTS_CAP: f64 = 12.0;

const PRODUCTS: [&str; 6] = ["db2", "websphere", "mq", "cognos", "tivoli", "spss"];
const SYMPTOMS: [&str; 8] = [
    "crash on startup",
    "slow response times",
    "license activation failure",
    "data corruption after upgrade",
    "memory leak under load",
    "authentication errors",
    "report generation hangs",
    "installer rollback",
];
const N_ANALYSTS: usize = 12;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Customer {
    difficulty: f64,
    product: usize,
}

struct Draft {
    customer: usize,
    product: usize,
    symptom: usize,
    created: i64,
    duration: i64,
    initial_severity: u8,
    /// (offset, old, new)
    severity_changes: Vec<(i64, u8, u8)>,
    contacts: Vec<i64>,
    owner_changes: Vec<i64>,
    field_changes: Vec<i64>,
    label_draw: f64,
}

impl Draft {
    fn closes_at(&self) -> i64 {
        self.created + self.duration
    }

    fn peak_severity(&self) -> u8 {
        self.severity_changes
            .iter()
            .map(|&(_, _, new)| new)
            .chain(std::iter::once(self.initial_severity))
            .min()
            .unwrap_or(self.initial_severity)
    }

    fn base_logit(&self) -> f64 {
        let severity = (4.0 - self.peak_severity() as f64) / 3.0;
        let duration = (self.duration as f64 / 86_400.0).min(DURATION_CAP_DAYS) / DURATION_CAP_DAYS;
        let contacts = (self.contacts.len() as f64).min(CONTACTS_CAP) / CONTACTS_CAP;
        WEIGHT_SEVERITY * severity + WEIGHT_DURATION * duration + WEIGHT_CONTACTS * contacts
    }
}

fn offset_within(rng: &mut ChaCha8Rng, duration: i64, lo: f64, hi: f64) -> i64 {
    let frac = rng.random_range(lo..hi);
    ((frac * duration as f64) as i64).clamp(1, duration - 1)
}

fn draft_ticket(rng: &mut ChaCha8Rng, customers: &[Customer], horizon_secs: i64) -> Draft {
    let customer = rng.random_range(0..customers.len());
    let c = &customers[customer];
    let product = if rng.random_bool(0.75) {
        c.product
    } else {
        rng.random_range(0..PRODUCTS.len())
    };
    let symptom = rng.random_range(0..SYMPTOMS.len());
    let created = rng.random_range(0..horizon_secs);

    let mean_days = 4.0 + 14.0 * c.difficulty;
    let u: f64 = rng.random();
    let days = (0.25 - mean_days * (1.0 - u).ln()).min(90.0);
    let duration = (days * 86_400.0) as i64;

    let severity_roll: f64 = rng.random();
    let mut initial_severity: u8 = match severity_roll {
        r if r < 0.10 => 1,
        r if r < 0.40 => 2,
        r if r < 0.80 => 3,
        _ => 4,
    };
    if initial_severity > 1 && rng.random_bool(0.35 * c.difficulty) {
        initial_severity -= 1;
    }

    // Severity changes happen early in a ticket's life.
    let mut change_times: Vec<i64> = Vec::new();
    let mut change_dirs: Vec<bool> = Vec::new();
    for _ in 0..2 {
        if rng.random_bool(0.1 + 0.4 * c.difficulty) {
            change_times.push(offset_within(rng, duration, 0.02, 0.45));
            change_dirs.push(true);
        } else if rng.random_bool(0.08) {
            change_times.push(offset_within(rng, duration, 0.02, 0.45));
            change_dirs.push(false);
        }
    }
    change_times.sort_unstable();
    let mut severity_changes = Vec::new();
    let mut current: u8 = initial_severity;
    for (at, more_severe) in change_times.into_iter().zip(change_dirs) {
        let next = if more_severe {
            current.saturating_sub(1).max(1)
        } else {
            (current + 1).min(4)
        };
        if next != current {
            severity_changes.push((at, current, next));
            current = next;
        }
    }

    let contact_p = 0.1 + 0.5 * c.difficulty;
    let n_contacts = (0..12).filter(|_| rng.random_bool(contact_p)).count();
    let contacts = (0..n_contacts)
        .map(|_| offset_within(rng, duration, 0.0, 1.0))
        .collect();
    let n_owner = rng.random_range(0..=3);
    let owner_changes = (0..n_owner)
        .map(|_| offset_within(rng, duration, 0.0, 1.0))
        .collect();
    let n_field = rng.random_range(0..=2);
    let field_changes = (0..n_field)
        .map(|_| offset_within(rng, duration, 0.0, 1.0))
        .collect();

    Draft {
        customer,
        product,
        symptom,
        created,
        duration,
        initial_severity,
        severity_changes,
        contacts,
        owner_changes,
        field_changes,
        label_draw: rng.random(),
    }
}

/// Draws labels in creation order for a given bias. Returns the labels and
/// the mean escalation probability over resolved tickets.
fn draw_labels(drafts: &[Draft], horizon_secs: i64, n_customers: usize, bias: f64) -> (Vec<bool>, f64) {
    let mut history: Vec<Vec<(i64, bool)>> = vec![Vec::new(); n_customers];
    let mut labels = Vec::with_capacity(drafts.len());
    let (mut p_sum, mut resolved) = (0.0, 0usize);
    for d in drafts {
        let prior = history[d.customer]
            .iter()
            .filter(|&&(closed, escalated)| escalated && closed <= d.created)
            .count() as f64;
        let logit = d.base_logit()
            + WEIGHT_PRIOR_ESCALATIONS * prior.min(PRIOR_ESCALATIONS_CAP) / PRIOR_ESCALATIONS_CAP
            + bias;
        let p = logistic(logit);
        let label = d.label_draw < p;
        labels.push(label);
        if d.closes_at() <= horizon_secs {
            p_sum += p;
            resolved += 1;
            history[d.customer].push((d.closes_at(), label));
        }
    }
    let mean = if resolved == 0 { 0.0 } else { p_sum / resolved as f64 };
    (labels, mean)
}

fn calibrate_bias(drafts: &[Draft], horizon_secs: i64, n_customers: usize, target: f64) -> f64 {
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (_, mean) = draw_labels(drafts, horizon_secs, n_customers, mid);
        if mean < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn materialize(id: &str, d: &Draft, escalated: bool, epoch: Timestamp, horizon_secs: i64) -> TicketRecord {
    let at = |offset: i64| epoch + Duration::seconds(offset);
    let created_at = at(d.created);
    let resolved = d.closes_at() <= horizon_secs;

    // (absolute offset, ordering rank, event)
    let mut pending: Vec<(i64, u8, TicketEvent)> = Vec::new();
    let blank = |offset: i64, kind| TicketEvent::new(String::new(), at(offset), kind);
    for &(off, old, new) in &d.severity_changes {
        pending.push((
            d.created + off,
            1,
            blank(d.created + off, EventKind::SeverityChange)
                .with_detail("old", old.to_string())
                .with_detail("new", new.to_string()),
        ));
    }
    for (i, &off) in d.contacts.iter().enumerate() {
        let channel = if i % 3 == 0 { "phone" } else { "email" };
        pending.push((
            d.created + off,
            1,
            blank(d.created + off, EventKind::CustomerContact).with_detail("channel", channel),
        ));
    }
    for &off in &d.field_changes {
        pending.push((
            d.created + off,
            1,
            blank(d.created + off, EventKind::FieldChange).with_detail("field", "component"),
        ));
    }
    let mut owner = d.customer % N_ANALYSTS;
    let mut owner_offsets = d.owner_changes.clone();
    owner_offsets.sort_unstable();
    for off in owner_offsets {
        let next = (owner + 1 + (off as usize % (N_ANALYSTS - 1))) % N_ANALYSTS;
        pending.push((
            d.created + off,
            1,
            blank(d.created + off, EventKind::OwnerChange)
                .with_detail("old", format!("analyst-{owner:02}"))
                .with_detail("new", format!("analyst-{next:02}")),
        ));
        owner = next;
    }
    pending.retain(|(abs, _, _)| *abs <= horizon_secs);
    // Sorting by (offset, rank) keeps severity changes in drafted order
    // because their offsets were sorted when drafted and the sort is stable.
    pending.sort_by_key(|(abs, rank, _)| (*abs, *rank));

    let mut events = vec![TicketEvent::new(String::new(), created_at, EventKind::Created)
        .with_detail("severity", d.initial_severity.to_string())];
    events.extend(pending.into_iter().map(|(_, _, e)| e));

    let final_severity = d
        .severity_changes
        .iter()
        .rev()
        .find(|(off, _, _)| d.created + off <= horizon_secs)
        .map(|&(_, _, new)| new)
        .unwrap_or(d.initial_severity);

    let (state, closed_at) = if resolved {
        let state = if escalated {
            TicketState::Escalated
        } else {
            TicketState::Closed
        };
        let closed_at = at(d.closes_at());
        events.push(
            TicketEvent::new(String::new(), closed_at, EventKind::StateChange)
                .with_detail("old", "open")
                .with_detail("new", state.as_str()),
        );
        (state, Some(closed_at))
    } else {
        (TicketState::Open, None)
    };
    for (i, e) in events.iter_mut().enumerate() {
        e.event_id = format!("{id}-E{:03}", i + 1);
    }

    let product = PRODUCTS[d.product];
    TicketRecord {
        ticket_id: id.to_string(),
        customer_id: format!("CUST-{:04}", d.customer + 1),
        product: product.to_string(),
        title: format!("{product}: {}", SYMPTOMS[d.symptom]),
        description: format!(
            "Customer reports {} in {product}; see attached diagnostics.",
            SYMPTOMS[d.symptom]
        ),
        severity: final_severity,
        state,
        created_at,
        closed_at,
        events,
    }
}

/// Generates a synthetic repository whose escalation labels are driven by
/// the ticket and customer factors described in the module docs.
pub fn generate_mock_repository(config: &MockConfig) -> Result<RepositorySnapshot, IngestError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let horizon_secs = config.horizon_days as i64 * 86_400;
    let epoch = mock_epoch();

    let customers: Vec<Customer> = (0..config.n_customers)
        .map(|_| Customer {
            difficulty: rng.random(),
            product: rng.random_range(0..PRODUCTS.len()),
        })
        .collect();
    let mut drafts: Vec<Draft> = (0..config.n_tickets)
        .map(|_| draft_ticket(&mut rng, &customers, horizon_secs))
        .collect();
    drafts.sort_by_key(|d| d.created);

    let bias = calibrate_bias(&drafts, horizon_secs, customers.len(), config.base_escalation_rate);
    let (labels, _) = draw_labels(&drafts, horizon_secs, customers.len(), bias);

    let width = config.n_tickets.to_string().len().max(5);
    let tickets = drafts.iter().zip(labels).enumerate().map(|(i, (d, label))| {
        let id = format!("PMR-{:0width$}", i + 1);
        materialize(&id, d, label, epoch, horizon_secs)
    });
    Ok(RepositorySnapshot::from_tickets(
        tickets,
        &format!("synthetic:{}", config.seed),
    ))
}

/// Replaces every resolved ticket's outcome with an independent coin flip
/// (escalated with probability `rate`), destroying any feature signal.
pub fn randomize_labels(snapshot: &RepositorySnapshot, seed: u64, rate: f64) -> RepositorySnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = snapshot.clone();
    for ticket in out.tickets.values_mut() {
        if !ticket.state.is_terminal() {
            continue;
        }
        let state = if rng.random_bool(rate) {
            TicketState::Escalated
        } else {
            TicketState::Closed
        };
        ticket.state = state;
        if let Some(last) = ticket
            .events
            .iter_mut()
            .rev()
            .find(|e| e.kind == EventKind::StateChange)
        {
            last.detail.insert("new".into(), state.as_str().into());
        }
    }
    out.source = format!("{}+random-labels:{seed}", snapshot.source);
    out
}

/// Fraction of resolved tickets that escalated.
pub fn escalated_fraction(snapshot: &RepositorySnapshot) -> f64 {
    let (mut resolved, mut escalated) = (0usize, 0usize);
    for t in snapshot.tickets.values() {
        if t.state.is_terminal() {
            resolved += 1;
            escalated += usize::from(t.state == TicketState::Escalated);
        }
    }
    if resolved == 0 {
        0.0
    } else {
        escalated as f64 / resolved as f64
    }
}
