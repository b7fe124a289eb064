//! Collaboration and risk-history persistence.
//!
//! Everything lives in one append-only JSON Lines log. Each line carries a
//! global sequence number and one record; opening a store replays the log
//! into memory. Writers are serialized and every append is synced to disk
//! before the call returns. A torn final line (no trailing newline) left by
//! a crash is dropped on open.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingestion::RepositorySnapshot;
use crate::model::{timestamp, Comment, FollowMarker, NextAction, TicketEvent, Timestamp, User};
use crate::scoring::{risk_history, RiskPoint, RiskSnapshot};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O failed: {0}")]
    Io(#[from] io::Error),
    #[error("store log corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("unknown {kind} {id}")]
    NotFound { kind: &'static str, id: String },
    #[error("{0}")]
    Validation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringRun {
    pub run_id: String,
    #[serde(with = "timestamp")]
    pub run_at: Timestamp,
    pub model_version: String,
    pub snapshots: Vec<RiskSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogRecord {
    User(User),
    Comment(Comment),
    NextAction(NextAction),
    Follow {
        user_id: String,
        ticket_id: String,
        following: bool,
        #[serde(with = "timestamp")]
        at: Timestamp,
    },
    ScoringRun(ScoringRun),
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    #[serde(flatten)]
    record: LogRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimelineKind {
    TicketEvent,
    Comment,
    NextAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderHint {
    Default,
    CommentGreen,
    ActionLightblue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimelinePayload {
    TicketEvent(TicketEvent),
    Comment(Comment),
    NextAction(NextAction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    #[serde(with = "timestamp")]
    pub timestamp: Timestamp,
    pub kind: TimelineKind,
    pub render_hint: RenderHint,
    pub payload: TimelinePayload,
}

impl TimelineEntry {
    fn new(timestamp: Timestamp, payload: TimelinePayload) -> Self {
        let (kind, render_hint) = match payload {
            TimelinePayload::TicketEvent(_) => (TimelineKind::TicketEvent, RenderHint::Default),
            TimelinePayload::Comment(_) => (TimelineKind::Comment, RenderHint::CommentGreen),
            TimelinePayload::NextAction(_) => (TimelineKind::NextAction, RenderHint::ActionLightblue),
        };
        TimelineEntry {
            timestamp,
            kind,
            render_hint,
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowState {
    pub user_id: String,
    pub ticket_id: String,
    pub following: bool,
    #[serde(with = "timestamp::option")]
    pub followed_at: Option<Timestamp>,
}

/// In-memory image of the log.
#[derive(Default)]
pub struct StoreState {
    users: BTreeMap<String, User>,
    comments: HashMap<String, Vec<(u64, Comment)>>,
    actions: HashMap<String, Vec<(u64, NextAction)>>,
    follows: BTreeMap<(String, String), FollowMarker>,
    runs: Vec<ScoringRun>,
    latest: HashMap<String, RiskSnapshot>,
}

impl StoreState {
    fn apply(&mut self, seq: u64, record: LogRecord) {
        match record {
            LogRecord::User(u) => {
                self.users.insert(u.user_id.clone(), u);
            }
            LogRecord::Comment(c) => self.comments.entry(c.ticket_id.clone()).or_default().push((seq, c)),
            LogRecord::NextAction(a) => self.actions.entry(a.ticket_id.clone()).or_default().push((seq, a)),
            LogRecord::Follow {
                user_id,
                ticket_id,
                following,
                at,
            } => {
                let key = (user_id.clone(), ticket_id.clone());
                if following {
                    self.follows.entry(key).or_insert(FollowMarker {
                        user_id,
                        ticket_id,
                        followed_at: at,
                    });
                } else {
                    self.follows.remove(&key);
                }
            }
            LogRecord::ScoringRun(run) => {
                for s in &run.snapshots {
                    self.latest.insert(s.ticket_id.clone(), s.clone());
                }
                self.runs.push(run);
            }
        }
    }

    pub fn user(&self, user_id: &str) -> Option<&User> {
        self.users.get(user_id)
    }

    pub fn comments(&self, ticket_id: &str) -> Vec<&Comment> {
        self.comments
            .get(ticket_id)
            .map(|v| v.iter().map(|(_, c)| c).collect())
            .unwrap_or_default()
    }

    pub fn next_actions(&self, ticket_id: &str) -> Vec<&NextAction> {
        self.actions
            .get(ticket_id)
            .map(|v| v.iter().map(|(_, a)| a).collect())
            .unwrap_or_default()
    }

    /// Latest next action by timestamp; insertion order breaks ties.
    pub fn current_next_action(&self, ticket_id: &str) -> Option<&NextAction> {
        self.actions
            .get(ticket_id)?
            .iter()
            .max_by_key(|(seq, a)| (a.timestamp, *seq))
            .map(|(_, a)| a)
    }

    pub fn is_following(&self, user_id: &str, ticket_id: &str) -> bool {
        self.follows.contains_key(&(user_id.to_string(), ticket_id.to_string()))
    }

    pub fn follows(&self, user_id: &str) -> Vec<FollowMarker> {
        self.follows
            .values()
            .filter(|m| m.user_id == user_id)
            .cloned()
            .collect()
    }

    pub fn followers(&self, ticket_id: &str) -> Vec<String> {
        self.follows
            .values()
            .filter(|m| m.ticket_id == ticket_id)
            .map(|m| m.user_id.clone())
            .collect()
    }

    pub fn runs(&self) -> &[ScoringRun] {
        &self.runs
    }

    pub fn latest_run(&self) -> Option<&ScoringRun> {
        self.runs.last()
    }

    pub fn latest_snapshot(&self, ticket_id: &str) -> Option<&RiskSnapshot> {
        self.latest.get(ticket_id)
    }

    /// Most recent snapshot of every ticket ever scored.
    pub fn latest_snapshots(&self) -> Vec<RiskSnapshot> {
        let mut out: Vec<RiskSnapshot> = self.latest.values().cloned().collect();
        out.sort_by(|a, b| a.ticket_id.cmp(&b.ticket_id));
        out
    }

    pub fn history(&self) -> Vec<RiskSnapshot> {
        self.runs.iter().flat_map(|r| r.snapshots.iter().cloned()).collect()
    }

    pub fn risk_history(&self, ticket_id: &str) -> Vec<RiskPoint> {
        let snaps: Vec<RiskSnapshot> = self
            .runs
            .iter()
            .flat_map(|r| r.snapshots.iter().filter(|s| s.ticket_id == ticket_id).cloned())
            .collect();
        risk_history(ticket_id, &snaps)
    }

    /// Ticket events, comments and next actions woven by timestamp. Equal
    /// instants order events before comments before next actions, then by
    /// insertion.
    pub fn weave(&self, events: &[TicketEvent], ticket_id: &str) -> Vec<TimelineEntry> {
        let mut keyed: Vec<((Timestamp, TimelineKind, u64), TimelineEntry)> = Vec::new();
        for (i, e) in events.iter().enumerate() {
            keyed.push((
                (e.timestamp, TimelineKind::TicketEvent, i as u64),
                TimelineEntry::new(e.timestamp, TimelinePayload::TicketEvent(e.clone())),
            ));
        }
        for (seq, c) in self.comments.get(ticket_id).into_iter().flatten() {
            keyed.push((
                (c.timestamp, TimelineKind::Comment, *seq),
                TimelineEntry::new(c.timestamp, TimelinePayload::Comment(c.clone())),
            ));
        }
        for (seq, a) in self.actions.get(ticket_id).into_iter().flatten() {
            keyed.push((
                (a.timestamp, TimelineKind::NextAction, *seq),
                TimelineEntry::new(a.timestamp, TimelinePayload::NextAction(a.clone())),
            ));
        }
        keyed.sort_by_key(|(k, _)| *k);
        keyed.into_iter().map(|(_, e)| e).collect()
    }
}

struct Writer {
    file: File,
    next_seq: u64,
}

pub struct Store {
    path: PathBuf,
    repo: Arc<RepositorySnapshot>,
    writer: Mutex<Writer>,
    state: RwLock<StoreState>,
}

/// Read access to one consistent state of the store.
pub type StoreView<'a> = RwLockReadGuard<'a, StoreState>;

fn non_empty(body: &str) -> Result<(), StoreError> {
    if body.trim().is_empty() {
        Err(StoreError::Validation("body must not be empty".into()))
    } else {
        Ok(())
    }
}

impl Store {
    /// Opens (creating if needed) the log at `path` for tickets in `repo`.
    pub fn open(path: impl AsRef<Path>, repo: Arc<RepositorySnapshot>) -> Result<Store, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;

        let mut state = StoreState::default();
        let mut next_seq = 1;
        let mut good_len = 0u64;
        let mut reader = BufReader::new(&mut file);
        let mut line = String::new();
        let mut line_no = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let complete = line.ends_with('\n');
            if line.trim().is_empty() {
                good_len += n as u64;
                continue;
            }
            match (serde_json::from_str::<LogLine>(line.trim_end()), complete) {
                (Ok(entry), true) => {
                    next_seq = next_seq.max(entry.seq + 1);
                    state.apply(entry.seq, entry.record);
                    good_len += n as u64;
                }
                // a torn tail from an interrupted append
                (_, false) => break,
                (Err(e), true) => {
                    return Err(StoreError::Corrupt {
                        line: line_no,
                        message: e.to_string(),
                    })
                }
            }
        }
        drop(reader);
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
        }
        file.seek(SeekFrom::End(0))?;

        Ok(Store {
            path,
            repo,
            writer: Mutex::new(Writer { file, next_seq }),
            state: RwLock::new(state),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn repository(&self) -> &Arc<RepositorySnapshot> {
        &self.repo
    }

    pub fn view(&self) -> StoreView<'_> {
        self.state.read().expect("store lock poisoned")
    }

    /// Appends one record durably, then makes it visible to readers.
    fn append(&self, make: impl FnOnce(u64) -> LogRecord) -> Result<LogRecord, StoreError> {
        let mut writer = self.writer.lock().expect("store lock poisoned");
        let seq = writer.next_seq;
        let record = make(seq);
        let mut bytes = serde_json::to_vec(&LogLine {
            seq,
            record: record.clone(),
        })
        .map_err(io::Error::from)?;
        bytes.push(b'\n');
        writer.file.write_all(&bytes)?;
        writer.file.sync_data()?;
        writer.next_seq += 1;
        self.state
            .write()
            .expect("store lock poisoned")
            .apply(seq, record.clone());
        Ok(record)
    }

    fn require_ticket(&self, ticket_id: &str) -> Result<(), StoreError> {
        if self.repo.get(ticket_id).is_some() {
            Ok(())
        } else {
            Err(StoreError::NotFound {
                kind: "ticket",
                id: ticket_id.to_string(),
            })
        }
    }

    fn require_user(&self, user_id: &str) -> Result<(), StoreError> {
        if self.view().user(user_id).is_some() {
            Ok(())
        } else {
            Err(StoreError::NotFound {
                kind: "user",
                id: user_id.to_string(),
            })
        }
    }

    /// Registers a user on first sight; existing users are returned as is.
    pub fn ensure_user(&self, user_id: &str, display_name: &str) -> Result<User, StoreError> {
        if user_id.trim().is_empty() {
            return Err(StoreError::Validation("user_id must not be empty".into()));
        }
        if let Some(u) = self.view().user(user_id) {
            return Ok(u.clone());
        }
        let user = User {
            user_id: user_id.to_string(),
            display_name: display_name.to_string(),
        };
        self.append(|_| LogRecord::User(user.clone()))?;
        Ok(user)
    }

    pub fn add_comment(&self, ticket_id: &str, author: &str, body: &str, at: Timestamp) -> Result<Comment, StoreError> {
        self.require_ticket(ticket_id)?;
        self.require_user(author)?;
        non_empty(body)?;
        match self.append(|seq| {
            LogRecord::Comment(Comment {
                comment_id: format!("cmt-{seq:012}"),
                ticket_id: ticket_id.to_string(),
                author: author.to_string(),
                timestamp: at,
                body: body.to_string(),
            })
        })? {
            LogRecord::Comment(c) => Ok(c),
            _ => unreachable!(),
        }
    }

    pub fn add_next_action(&self, ticket_id: &str, author: &str, body: &str, at: Timestamp) -> Result<NextAction, StoreError> {
        self.require_ticket(ticket_id)?;
        self.require_user(author)?;
        non_empty(body)?;
        match self.append(|seq| {
            LogRecord::NextAction(NextAction {
                action_id: format!("act-{seq:012}"),
                ticket_id: ticket_id.to_string(),
                author: author.to_string(),
                timestamp: at,
                body: body.to_string(),
            })
        })? {
            LogRecord::NextAction(a) => Ok(a),
            _ => unreachable!(),
        }
    }

    /// Idempotent: repeating a call leaves one marker (or none) and writes
    /// nothing new.
    pub fn set_follow(&self, user_id: &str, ticket_id: &str, following: bool, at: Timestamp) -> Result<FollowState, StoreError> {
        self.require_ticket(ticket_id)?;
        self.require_user(user_id)?;
        if self.view().is_following(user_id, ticket_id) != following {
            self.append(|_| LogRecord::Follow {
                user_id: user_id.to_string(),
                ticket_id: ticket_id.to_string(),
                following,
                at,
            })?;
        }
        let view = self.view();
        let marker = view
            .follows
            .get(&(user_id.to_string(), ticket_id.to_string()));
        Ok(FollowState {
            user_id: user_id.to_string(),
            ticket_id: ticket_id.to_string(),
            following: marker.is_some(),
            followed_at: marker.map(|m| m.followed_at),
        })
    }

    pub fn timeline(&self, ticket_id: &str) -> Result<Vec<TimelineEntry>, StoreError> {
        let ticket = self.repo.get(ticket_id).ok_or_else(|| StoreError::NotFound {
            kind: "ticket",
            id: ticket_id.to_string(),
        })?;
        Ok(self.view().weave(&ticket.events, ticket_id))
    }

    /// Commits a whole scoring run as a single record.
    pub fn record_run(&self, run: ScoringRun) -> Result<(), StoreError> {
        self.append(|_| LogRecord::ScoringRun(run))?;
        Ok(())
    }
}
