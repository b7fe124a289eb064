//! Domain vocabulary shared by every module: tickets and their event
//! histories, analysts, and the collaboration records attached to tickets.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// UTC instant with second precision.
pub type Timestamp = DateTime<Utc>;

pub const MIN_SEVERITY: u8 = 1;
pub const MAX_SEVERITY: u8 = 4;

const SECONDS_PER_DAY: f64 = 86_400.0;

/// Fractional days between two instants (`later - earlier`).
pub fn days_between(earlier: Timestamp, later: Timestamp) -> f64 {
    (later - earlier).num_seconds() as f64 / SECONDS_PER_DAY
}

/// ISO-8601 UTC timestamps at second precision, e.g. `2017-03-01T09:00:00Z`.
pub mod timestamp {
    use super::Timestamp;
    use chrono::{DateTime, SecondsFormat, Timelike, Utc};
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn format(ts: &Timestamp) -> String {
        ts.to_rfc3339_opts(SecondsFormat::Secs, true)
    }

    pub fn parse(s: &str) -> Result<Timestamp, String> {
        let parsed = DateTime::parse_from_rfc3339(s)
            .map_err(|e| format!("invalid timestamp {s:?}: {e}"))?
            .with_timezone(&Utc);
        if parsed.nanosecond() != 0 {
            return Err(format!("timestamp {s:?} has sub-second precision"));
        }
        Ok(parsed)
    }

    /// Drops sub-second precision so wall-clock instants fit the format.
    pub fn truncate(ts: Timestamp) -> Timestamp {
        ts.with_nanosecond(0).unwrap_or(ts)
    }

    pub fn now() -> Timestamp {
        truncate(Utc::now())
    }

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        parse(&raw).map_err(D::Error::custom)
    }

    pub mod option {
        use super::Timestamp;
        use serde::{de::Error, Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(ts: &Option<Timestamp>, s: S) -> Result<S::Ok, S::Error> {
            match ts {
                Some(ts) => s.serialize_some(&super::format(ts)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Timestamp>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|raw| super::parse(&raw).map_err(D::Error::custom))
                .transpose()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketState {
    Open,
    Closed,
    Escalated,
}

impl TicketState {
    /// Closed and escalated tickets are both finished for lifecycle math.
    pub fn is_terminal(self) -> bool {
        !matches!(self, TicketState::Open)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TicketState::Open => "open",
            TicketState::Closed => "closed",
            TicketState::Escalated => "escalated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "open" => Some(TicketState::Open),
            "closed" => Some(TicketState::Closed),
            "escalated" => Some(TicketState::Escalated),
            _ => None,
        }
    }
}

impl fmt::Display for TicketState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Created,
    FieldChange,
    SeverityChange,
    OwnerChange,
    CustomerContact,
    StateChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketEvent {
    pub event_id: String,
    #[serde(with = "timestamp")]
    pub timestamp: Timestamp,
    pub kind: EventKind,
    #[serde(default)]
    pub detail: BTreeMap<String, String>,
}

impl TicketEvent {
    pub fn new(event_id: impl Into<String>, timestamp: Timestamp, kind: EventKind) -> Self {
        TicketEvent {
            event_id: event_id.into(),
            timestamp,
            kind,
            detail: BTreeMap::new(),
        }
    }

    pub fn with_detail(mut self, key: &str, value: impl Into<String>) -> Self {
        self.detail.insert(key.to_string(), value.into());
        self
    }

    /// `(old, new)` of a severity change, if both parse as integers.
    pub fn severity_transition(&self) -> Option<(i64, i64)> {
        let old = self.detail.get("old")?.parse().ok()?;
        let new = self.detail.get("new")?.parse().ok()?;
        Some((old, new))
    }

    pub fn new_state(&self) -> Option<TicketState> {
        self.detail.get("new").and_then(|s| TicketState::parse(s))
    }
}

/// One support ticket (a problem management record) with its full history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketRecord {
    pub ticket_id: String,
    pub customer_id: String,
    pub product: String,
    pub title: String,
    pub description: String,
    /// Severity after replaying every event; 1 is most severe.
    pub severity: u8,
    pub state: TicketState,
    #[serde(with = "timestamp")]
    pub created_at: Timestamp,
    #[serde(with = "timestamp::option", default)]
    pub closed_at: Option<Timestamp>,
    pub events: Vec<TicketEvent>,
}

/// Severity and state of a ticket after replaying a prefix of its events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayState {
    pub severity: u8,
    pub state: TicketState,
    /// When the ticket last entered a terminal state, if it is in one.
    pub terminal_since: Option<Timestamp>,
}

impl TicketRecord {
    /// Severity at creation. Taken from the created event's `severity`
    /// detail when present, otherwise the `old` side of the first change, or
    /// the recorded severity when it never changed.
    pub fn initial_severity(&self) -> u8 {
        let from_created = self
            .events
            .first()
            .filter(|e| e.kind == EventKind::Created)
            .and_then(|e| e.detail.get("severity"))
            .and_then(|s| s.parse::<u8>().ok());
        from_created
            .or_else(|| {
                self.events
                    .iter()
                    .filter(|e| e.kind == EventKind::SeverityChange)
                    .find_map(|e| e.severity_transition())
                    .and_then(|(old, _)| u8::try_from(old).ok())
            })
            .unwrap_or(self.severity)
    }

    /// Events visible at `as_of` (timestamp at or before it).
    pub fn events_until(&self, as_of: Timestamp) -> impl Iterator<Item = &TicketEvent> {
        self.events.iter().take_while(move |e| e.timestamp <= as_of)
    }

    /// Replays events up to and including `as_of`.
    pub fn replay_at(&self, as_of: Timestamp) -> ReplayState {
        let mut state = ReplayState {
            severity: self.initial_severity(),
            state: TicketState::Open,
            terminal_since: None,
        };
        for event in self.events_until(as_of) {
            apply_event(&mut state, event);
        }
        state
    }

    pub fn replay_final(&self) -> ReplayState {
        let mut state = ReplayState {
            severity: self.initial_severity(),
            state: TicketState::Open,
            terminal_since: None,
        };
        for event in &self.events {
            apply_event(&mut state, event);
        }
        state
    }
}

fn apply_event(state: &mut ReplayState, event: &TicketEvent) {
    match event.kind {
        EventKind::SeverityChange => {
            if let Some(new) = event
                .severity_transition()
                .and_then(|(_, new)| u8::try_from(new).ok())
            {
                state.severity = new;
            }
        }
        EventKind::StateChange => {
            if let Some(new) = event.new_state() {
                if new.is_terminal() {
                    if !state.state.is_terminal() {
                        state.terminal_since = Some(event.timestamp);
                    }
                } else {
                    state.terminal_since = None;
                }
                state.state = new;
            }
        }
        _ => {}
    }
}

/// A broken ticket invariant. Display strings are stable and appear in
/// rejects reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyTicketId,
    EmptyCustomerId,
    SeverityOutOfRange(u8),
    NoEvents,
    FirstEventNotCreated,
    FirstEventNotAtCreation,
    EventsUnsorted,
    DuplicateEventId(String),
    ClosedAtPrecedesCreatedAt,
    ClosedAtMissing,
    ClosedAtOnOpenTicket,
    ClosedAtMismatch,
    InvalidSeverityChange { event_id: String, reason: String },
    SeverityChainBroken { event_id: String, expected: u8, found: i64 },
    FinalSeverityMismatch { replayed: u8, recorded: u8 },
    InvalidStateChange { event_id: String },
    FinalStateMismatch { replayed: TicketState, recorded: TicketState },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyTicketId => f.write_str("ticket_id is empty"),
            Violation::EmptyCustomerId => f.write_str("customer_id is empty"),
            Violation::SeverityOutOfRange(s) => write!(f, "severity {s} outside 1-4"),
            Violation::NoEvents => f.write_str("events list is empty"),
            Violation::FirstEventNotCreated => f.write_str("first event is not a created event"),
            Violation::FirstEventNotAtCreation => {
                f.write_str("first event timestamp differs from created_at")
            }
            Violation::EventsUnsorted => f.write_str("events unsorted"),
            Violation::DuplicateEventId(id) => write!(f, "duplicate event_id {id}"),
            Violation::ClosedAtPrecedesCreatedAt => f.write_str("closed_at precedes created_at"),
            Violation::ClosedAtMissing => f.write_str("closed_at missing on finished ticket"),
            Violation::ClosedAtOnOpenTicket => f.write_str("closed_at present on open ticket"),
            Violation::ClosedAtMismatch => {
                f.write_str("closed_at does not match the terminal state_change")
            }
            Violation::InvalidSeverityChange { event_id, reason } => {
                write!(f, "severity_change {event_id}: {reason}")
            }
            Violation::SeverityChainBroken {
                event_id,
                expected,
                found,
            } => write!(
                f,
                "severity_change {event_id}: old {found} but replayed severity is {expected}"
            ),
            Violation::FinalSeverityMismatch { replayed, recorded } => write!(
                f,
                "recorded severity {recorded} differs from replayed severity {replayed}"
            ),
            Violation::InvalidStateChange { event_id } => {
                write!(f, "state_change {event_id}: new state must be open, closed or escalated")
            }
            Violation::FinalStateMismatch { replayed, recorded } => write!(
                f,
                "recorded state {recorded} differs from replayed state {replayed}"
            ),
        }
    }
}

/// Outcome of [`validate_ticket`]: empty means the record is well formed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Validation {
    pub violations: Vec<Violation>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }
}

fn valid_severity(s: i64) -> bool {
    (MIN_SEVERITY as i64..=MAX_SEVERITY as i64).contains(&s)
}

/// Checks every ticket invariant and reports all violations found.
pub fn validate_ticket(record: &TicketRecord) -> Validation {
    let mut out = Vec::new();

    if record.ticket_id.trim().is_empty() {
        out.push(Violation::EmptyTicketId);
    }
    if record.customer_id.trim().is_empty() {
        out.push(Violation::EmptyCustomerId);
    }
    if !valid_severity(record.severity as i64) {
        out.push(Violation::SeverityOutOfRange(record.severity));
    }

    match record.events.first() {
        None => out.push(Violation::NoEvents),
        Some(first) => {
            if first.kind != EventKind::Created {
                out.push(Violation::FirstEventNotCreated);
            }
            if first.timestamp != record.created_at {
                out.push(Violation::FirstEventNotAtCreation);
            }
        }
    }
    if record.events.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        out.push(Violation::EventsUnsorted);
    }
    let mut seen = HashSet::new();
    for event in &record.events {
        if !seen.insert(event.event_id.as_str()) {
            out.push(Violation::DuplicateEventId(event.event_id.clone()));
        }
    }

    // Severity chain: each change starts where the previous one ended.
    let mut severity = record.initial_severity();
    for event in &record.events {
        match event.kind {
            EventKind::SeverityChange => match event.severity_transition() {
                None => out.push(Violation::InvalidSeverityChange {
                    event_id: event.event_id.clone(),
                    reason: "old/new must be integers".into(),
                }),
                Some((old, new)) if !valid_severity(old) || !valid_severity(new) => {
                    out.push(Violation::InvalidSeverityChange {
                        event_id: event.event_id.clone(),
                        reason: "old/new must be within 1-4".into(),
                    })
                }
                Some((old, new)) if old == new => out.push(Violation::InvalidSeverityChange {
                    event_id: event.event_id.clone(),
                    reason: "old equals new".into(),
                }),
                Some((old, new)) => {
                    if old != severity as i64 {
                        out.push(Violation::SeverityChainBroken {
                            event_id: event.event_id.clone(),
                            expected: severity,
                            found: old,
                        });
                    }
                    severity = new as u8;
                }
            },
            EventKind::StateChange if event.new_state().is_none() => {
                out.push(Violation::InvalidStateChange {
                    event_id: event.event_id.clone(),
                })
            }
            _ => {}
        }
    }
    if severity != record.severity {
        out.push(Violation::FinalSeverityMismatch {
            replayed: severity,
            recorded: record.severity,
        });
    }

    let replay = record.replay_final();
    if replay.state != record.state {
        out.push(Violation::FinalStateMismatch {
            replayed: replay.state,
            recorded: record.state,
        });
    }
    match (record.state.is_terminal(), record.closed_at) {
        (true, None) => out.push(Violation::ClosedAtMissing),
        (false, Some(_)) => out.push(Violation::ClosedAtOnOpenTicket),
        (true, Some(closed_at)) => {
            if closed_at < record.created_at {
                out.push(Violation::ClosedAtPrecedesCreatedAt);
            }
            if replay.state == record.state && replay.terminal_since != Some(closed_at) {
                out.push(Violation::ClosedAtMismatch);
            }
        }
        (false, None) => {}
    }

    Validation { violations: out }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub user_id: String,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub comment_id: String,
    pub ticket_id: String,
    pub author: String,
    #[serde(with = "timestamp")]
    pub timestamp: Timestamp,
    pub body: String,
}

/// The next actionable task on a ticket. The latest one by timestamp is the
/// ticket's current next action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextAction {
    pub action_id: String,
    pub ticket_id: String,
    pub author: String,
    #[serde(with = "timestamp")]
    pub timestamp: Timestamp,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowMarker {
    pub user_id: String,
    pub ticket_id: String,
    #[serde(with = "timestamp")]
    pub followed_at: Timestamp,
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn ts(s: &str) -> Timestamp {
        timestamp::parse(s).unwrap()
    }

    /// Open severity-3 ticket with three ordered events.
    pub fn open_ticket(id: &str, customer: &str) -> TicketRecord {
        let created = ts("2017-03-01T09:00:00Z");
        TicketRecord {
            ticket_id: id.into(),
            customer_id: customer.into(),
            product: "db2".into(),
            title: "Query planner regression".into(),
            description: "Slow queries after upgrade".into(),
            severity: 3,
            state: TicketState::Open,
            created_at: created,
            closed_at: None,
            events: vec![
                TicketEvent::new(format!("{id}-E1"), created, EventKind::Created),
                TicketEvent::new(format!("{id}-E2"), ts("2017-03-01T12:00:00Z"), EventKind::OwnerChange)
                    .with_detail("old", "alice")
                    .with_detail("new", "bob"),
                TicketEvent::new(
                    format!("{id}-E3"),
                    ts("2017-03-02T08:00:00Z"),
                    EventKind::CustomerContact,
                ),
            ],
        }
    }

    /// Closes `ticket` into `state` at `at` by appending a terminal transition.
    pub fn finish(mut ticket: TicketRecord, state: TicketState, at: &str) -> TicketRecord {
        let at = ts(at);
        let n = ticket.events.len() + 1;
        ticket.events.push(
            TicketEvent::new(format!("{}-E{n}", ticket.ticket_id), at, EventKind::StateChange)
                .with_detail("old", "open")
                .with_detail("new", state.as_str()),
        );
        ticket.state = state;
        ticket.closed_at = Some(at);
        ticket
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn well_formed_open_ticket_is_ok() {
        let v = validate_ticket(&open_ticket("T1", "C1"));
        assert!(v.is_ok(), "{:?}", v.messages());
    }

    #[test]
    fn closed_before_created_is_reported() {
        let mut t = finish(open_ticket("T1", "C1"), TicketState::Closed, "2017-03-03T00:00:00Z");
        t.closed_at = Some(ts("2017-02-01T00:00:00Z"));
        let msgs = validate_ticket(&t).messages();
        assert!(msgs.contains(&"closed_at precedes created_at".to_string()), "{msgs:?}");
    }

    #[test]
    fn unsorted_events_are_reported() {
        let mut t = open_ticket("T1", "C1");
        t.events.swap(1, 2);
        let msgs = validate_ticket(&t).messages();
        assert!(msgs.contains(&"events unsorted".to_string()), "{msgs:?}");
    }

    #[test]
    fn every_violation_is_collected() {
        let mut t = open_ticket("", "C1");
        t.severity = 9;
        t.events.swap(1, 2);
        t.closed_at = Some(ts("2017-01-01T00:00:00Z"));
        let v = validate_ticket(&t);
        assert!(v.violations.contains(&Violation::EmptyTicketId));
        assert!(v.violations.contains(&Violation::SeverityOutOfRange(9)));
        assert!(v.violations.contains(&Violation::EventsUnsorted));
        assert!(v.violations.contains(&Violation::ClosedAtOnOpenTicket));
    }

    #[test]
    fn severity_change_rules() {
        let mut t = open_ticket("T1", "C1");
        t.events.push(
            TicketEvent::new("T1-E4", ts("2017-03-03T00:00:00Z"), EventKind::SeverityChange)
                .with_detail("old", "3")
                .with_detail("new", "3"),
        );
        assert!(matches!(
            validate_ticket(&t).violations[0],
            Violation::InvalidSeverityChange { .. }
        ));

        let mut t = open_ticket("T1", "C1");
        t.events.push(
            TicketEvent::new("T1-E4", ts("2017-03-03T00:00:00Z"), EventKind::SeverityChange)
                .with_detail("old", "3")
                .with_detail("new", "1"),
        );
        // recorded severity must follow the change
        assert!(matches!(
            validate_ticket(&t).violations[..],
            [Violation::FinalSeverityMismatch { replayed: 1, recorded: 3 }]
        ));
        t.severity = 1;
        assert!(validate_ticket(&t).is_ok());
        assert_eq!(t.initial_severity(), 3);
        assert_eq!(t.replay_at(ts("2017-03-02T23:59:59Z")).severity, 3);
        assert_eq!(t.replay_at(ts("2017-03-03T00:00:00Z")).severity, 1);
    }

    #[test]
    fn state_change_must_name_known_state() {
        let mut t = open_ticket("T1", "C1");
        t.events.push(
            TicketEvent::new("T1-E4", ts("2017-03-03T00:00:00Z"), EventKind::StateChange)
                .with_detail("new", "pending"),
        );
        assert!(validate_ticket(&t)
            .violations
            .contains(&Violation::InvalidStateChange { event_id: "T1-E4".into() }));
    }

    #[test]
    fn closed_at_must_match_terminal_transition() {
        let ok = finish(open_ticket("T1", "C1"), TicketState::Escalated, "2017-03-05T00:00:00Z");
        assert!(validate_ticket(&ok).is_ok());
        let mut bad = ok.clone();
        bad.closed_at = Some(ts("2017-03-06T00:00:00Z"));
        assert_eq!(validate_ticket(&bad).violations, vec![Violation::ClosedAtMismatch]);
        let mut missing = ok;
        missing.closed_at = None;
        assert_eq!(validate_ticket(&missing).violations, vec![Violation::ClosedAtMissing]);
    }

    #[test]
    fn replay_tracks_terminal_instant() {
        let t = finish(open_ticket("T1", "C1"), TicketState::Closed, "2017-03-05T00:00:00Z");
        let before = t.replay_at(ts("2017-03-04T00:00:00Z"));
        assert_eq!(before.state, TicketState::Open);
        assert_eq!(before.terminal_since, None);
        let after = t.replay_at(ts("2017-03-05T00:00:00Z"));
        assert_eq!(after.state, TicketState::Closed);
        assert_eq!(after.terminal_since, t.closed_at);
    }

    #[test]
    fn timestamps_are_second_precision_iso() {
        let t = ts("2017-03-01T09:00:00Z");
        assert_eq!(timestamp::format(&t), "2017-03-01T09:00:00Z");
        assert!(timestamp::parse("2017-03-01T09:00:00.5Z").is_err());
        assert_eq!(timestamp::parse("2017-03-01T10:00:00+01:00").unwrap(), t);
        let json = serde_json::to_string(&open_ticket("T1", "C1")).unwrap();
        assert!(json.contains("\"created_at\":\"2017-03-01T09:00:00Z\""));
        assert!(json.contains("\"closed_at\":null"));
    }
}
