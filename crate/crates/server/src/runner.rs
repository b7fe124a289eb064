//! Single-flight scoring runs. A trigger that arrives while a run is in
//! progress joins it and receives the same summary.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use escalate_core::model::timestamp;
use escalate_core::scoring::score_all;
use escalate_core::store::{ScoringRun, Store};
use escalate_core::{ForestModel, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub scored_count: usize,
    pub model_version: String,
    #[serde(with = "timestamp")]
    pub run_at: Timestamp,
    #[serde(with = "timestamp")]
    pub as_of: Timestamp,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error("no model loaded")]
    NoModel,
    #[error("scoring failed: {0}")]
    Failed(String),
}

type Outcome = Option<Result<RunSummary, RunError>>;

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(timestamp::now)
}

pub struct ScoringRunner {
    store: Arc<Store>,
    model: Option<Arc<ForestModel>>,
    clock: Clock,
    /// Artificial pause before scoring; lets tests overlap triggers.
    delay: Duration,
    in_flight: Mutex<Option<watch::Receiver<Outcome>>>,
}

impl ScoringRunner {
    pub fn new(store: Arc<Store>, model: Option<Arc<ForestModel>>, clock: Clock) -> Self {
        ScoringRunner {
            store,
            model,
            clock,
            delay: Duration::ZERO,
            in_flight: Mutex::new(None),
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn model(&self) -> Option<&Arc<ForestModel>> {
        self.model.as_ref()
    }

    /// Scoring instant: the repository's data horizon, so a static snapshot
    /// is scored as it stood when exported.
    pub fn as_of(&self) -> Timestamp {
        self.store.repository().loaded_at
    }

    /// Starts a run, or joins the one already in flight.
    pub async fn trigger(self: &Arc<Self>) -> Result<RunSummary, RunError> {
        let model = self.model.clone().ok_or(RunError::NoModel)?;
        let mut rx = {
            let mut slot = self.in_flight.lock().unwrap();
            match slot.as_ref() {
                Some(rx) => rx.clone(),
                None => {
                    let (tx, rx) = watch::channel(None);
                    *slot = Some(rx.clone());
                    let this = Arc::clone(self);
                    tokio::spawn(async move {
                        let worker = Arc::clone(&this);
                        let outcome = tokio::task::spawn_blocking(move || worker.execute(&model))
                            .await
                            .unwrap_or_else(|e| Err(RunError::Failed(e.to_string())));
                        // clear first so later triggers start a fresh run
                        *this.in_flight.lock().unwrap() = None;
                        let _ = tx.send(Some(outcome));
                    });
                    rx
                }
            }
        };
        let outcome = rx
            .wait_for(Option::is_some)
            .await
            .map_err(|_| RunError::Failed("scoring task vanished".into()))?;
        outcome.clone().expect("waited for a value")
    }

    fn execute(&self, model: &ForestModel) -> Result<RunSummary, RunError> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let run_at = (self.clock)();
        let as_of = self.as_of();
        let (run_id, history) = {
            let view = self.store.view();
            (format!("run-{:06}", view.runs().len() + 1), view.latest_snapshots())
        };
        let snapshots = score_all(model, self.store.repository(), &history, as_of)
            .map_err(|e| RunError::Failed(e.to_string()))?;
        let summary = RunSummary {
            run_id: run_id.clone(),
            scored_count: snapshots.len(),
            model_version: model.model_version.clone(),
            run_at,
            as_of,
        };
        self.store
            .record_run(ScoringRun {
                run_id,
                run_at,
                model_version: model.model_version.clone(),
                snapshots,
            })
            .map_err(|e| RunError::Failed(e.to_string()))?;
        Ok(summary)
    }
}
