use std::collections::BTreeMap;
use std::sync::Mutex;

use dlcf_core::orchestrator::{
    EvaluationEvent, EventSink, LoopEvent, RunSummary, StateSnapshot, VerificationRequest,
};
use dlcf_core::reservoir::PolicyRecord;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

pub const API_SCHEMA_VERSION: u32 = 1;

/// A loop event as streamed: `{schema_version, seq, type, payload}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiEvent {
    pub schema_version: u32,
    pub seq: u64,
    #[serde(flatten)]
    pub event: LoopEvent,
}

impl ApiEvent {
    pub fn kind(&self) -> &'static str {
        match self.event {
            LoopEvent::StateUpdate(_) => "state_update",
            LoopEvent::Evaluation(_) => "evaluation",
            LoopEvent::VerificationPending(_) => "verification_pending",
            LoopEvent::VerificationResolved(_) => "verification_resolved",
            LoopEvent::Recalibration(_) => "recalibration",
        }
    }
}

#[derive(Default)]
struct Snapshots {
    seq: u64,
    run_id: String,
    state: Option<StateSnapshot>,
    evaluation: Option<EvaluationEvent>,
    requests: BTreeMap<u64, VerificationRequest>,
    policies: Vec<PolicyRecord>,
    summary: Option<RunSummary>,
}

/// Fan-out point between the control loop and API clients. The loop writes
/// through [`EventSink`]; handlers read cloned snapshots.
pub struct Hub {
    inner: Mutex<Snapshots>,
    tx: broadcast::Sender<ApiEvent>,
}

impl Hub {
    /// `buffer` events may queue per subscriber; a subscriber that falls
    /// further behind is disconnected.
    pub fn new(run_id: &str, buffer: usize) -> Self {
        let (tx, _) = broadcast::channel(buffer.max(1));
        Self {
            inner: Mutex::new(Snapshots {
                run_id: run_id.into(),
                ..Snapshots::default()
            }),
            tx,
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Snapshots> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ApiEvent> {
        self.tx.subscribe()
    }

    pub fn run_id(&self) -> String {
        self.lock().run_id.clone()
    }

    pub fn last_seq(&self) -> u64 {
        self.lock().seq
    }

    pub fn state(&self) -> Option<StateSnapshot> {
        self.lock().state.clone()
    }

    pub fn latest_evaluation(&self) -> Option<EvaluationEvent> {
        self.lock().evaluation.clone()
    }

    pub fn request(&self, id: u64) -> Option<VerificationRequest> {
        self.lock().requests.get(&id).cloned()
    }

    pub fn pending(&self) -> Vec<VerificationRequest> {
        self.lock().requests.values().filter(|r| r.is_pending()).cloned().collect()
    }

    pub fn policies(&self) -> Vec<PolicyRecord> {
        self.lock().policies.clone()
    }

    pub fn summary(&self) -> Option<RunSummary> {
        self.lock().summary.clone()
    }

    pub fn set_policies(&self, policies: Vec<PolicyRecord>) {
        self.lock().policies = policies;
    }

    pub fn set_summary(&self, summary: RunSummary) {
        self.lock().summary = Some(summary);
    }
}

impl EventSink for Hub {
    fn emit(&self, event: &LoopEvent) {
        // Numbering and sending under one lock keeps seq order equal to
        // delivery order.
        let mut g = self.lock();
        g.seq += 1;
        match event {
            LoopEvent::StateUpdate(s) => g.state = Some(s.clone()),
            LoopEvent::Evaluation(e) => g.evaluation = Some(e.clone()),
            LoopEvent::VerificationPending(r) | LoopEvent::VerificationResolved(r) => {
                g.requests.insert(r.id, r.clone());
            }
            LoopEvent::Recalibration(_) => {}
        }
        let _ = self.tx.send(ApiEvent {
            schema_version: API_SCHEMA_VERSION,
            seq: g.seq,
            event: event.clone(),
        });
    }
}
