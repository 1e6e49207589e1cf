use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::plant::ControlAction;
use crate::safety::{ActionBounds, EvaluationReport, Selection};

pub const VERIFICATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VerificationStatus {
    Pending,
    Approved,
    Modified { action: ControlAction },
    Fallback,
    Expired,
}

impl VerificationStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            VerificationStatus::Pending => "pending",
            VerificationStatus::Approved => "approved",
            VerificationStatus::Modified { .. } => "modified",
            VerificationStatus::Fallback => "fallback",
            VerificationStatus::Expired => "expired",
        }
    }
}

/// An expert's answer to a pending request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum DecisionKind {
    Approve,
    Modify { action: ControlAction },
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    #[serde(flatten)]
    pub kind: DecisionKind,
    #[serde(default = "default_actor")]
    pub actor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

fn default_actor() -> String {
    "operator".into()
}

impl Decision {
    pub fn new(kind: DecisionKind) -> Self {
        Self {
            kind,
            actor: default_actor(),
            notes: None,
        }
    }

    pub fn approve() -> Self {
        Self::new(DecisionKind::Approve)
    }

    pub fn fallback() -> Self {
        Self::new(DecisionKind::Fallback)
    }

    pub fn modify(action: ControlAction) -> Self {
        Self::new(DecisionKind::Modify { action })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum DecisionError {
    #[error("request {id} is not pending (status {status})")]
    NotPending { id: u64, status: String },
    #[error("unknown request {id}")]
    Unknown { id: u64 },
    #[error("invalid decision: {reason}")]
    Invalid { reason: String },
    /// The modified action failed twin re-evaluation.
    #[error("decision rejected: {reason}")]
    Rejected {
        reason: String,
        report: Option<Box<EvaluationReport>>,
    },
    #[error("decision timed out waiting for the control loop")]
    Timeout,
}

/// A selected action held at the expert gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRequest {
    pub schema_version: u32,
    pub id: u64,
    pub step: usize,
    pub sim_time: f64,
    pub selected_id: String,
    pub selected_action: ControlAction,
    pub reports: Vec<EvaluationReport>,
    #[serde(flatten)]
    pub status: VerificationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl VerificationRequest {
    pub fn new(id: u64, step: usize, sim_time: f64, selection: &Selection) -> Self {
        Self {
            schema_version: VERIFICATION_SCHEMA_VERSION,
            id,
            step,
            sim_time,
            selected_id: selection.selected_id.clone(),
            selected_action: selection.action.clone(),
            reports: selection.reports.clone(),
            status: VerificationStatus::Pending,
            actor: None,
            notes: None,
        }
    }

    pub fn is_pending(&self) -> bool {
        self.status == VerificationStatus::Pending
    }

    /// Applies `decision` exactly once. A modified action is projected onto
    /// `bounds` and must pass `check`, a single-candidate pre-evaluation;
    /// on rejection the request stays pending.
    pub fn resolve(
        &mut self,
        decision: &Decision,
        bounds: &ActionBounds,
        check: &dyn Fn(&ControlAction) -> Result<Selection>,
    ) -> std::result::Result<(), DecisionError> {
        if !self.is_pending() {
            return Err(DecisionError::NotPending {
                id: self.id,
                status: self.status.as_str().into(),
            });
        }
        let status = match &decision.kind {
            DecisionKind::Approve => VerificationStatus::Approved,
            DecisionKind::Fallback => VerificationStatus::Fallback,
            DecisionKind::Modify { action } => {
                let projected = bounds.project(action).map_err(|e| DecisionError::Invalid {
                    reason: e.to_string(),
                })?;
                let sel = check(&projected).map_err(|e| DecisionError::Invalid {
                    reason: e.to_string(),
                })?;
                if sel.fallback {
                    return Err(DecisionError::Rejected {
                        reason: "modified action is predicted to violate the SLA".into(),
                        report: sel.reports.into_iter().next().map(Box::new),
                    });
                }
                VerificationStatus::Modified { action: projected }
            }
        };
        self.status = status;
        self.actor = Some(decision.actor.clone());
        self.notes = decision.notes.clone();
        Ok(())
    }

    /// Marks a still-pending request as timed out.
    pub fn expire(&mut self) -> std::result::Result<(), DecisionError> {
        if !self.is_pending() {
            return Err(DecisionError::NotPending {
                id: self.id,
                status: self.status.as_str().into(),
            });
        }
        self.status = VerificationStatus::Expired;
        self.actor = Some("timeout".into());
        Ok(())
    }
}

/// Where the loop gets expert decisions from.
pub trait DecisionSource: Send {
    /// The next decision for `req`, or `None` once `timeout_s` simulated
    /// seconds have passed without one.
    fn next_decision(&mut self, req: &VerificationRequest, timeout_s: f64) -> Option<Decision>;

    /// Result of applying the decision last returned for `req`.
    fn outcome(&mut self, _req: &VerificationRequest, _result: &std::result::Result<(), DecisionError>) {}
}

/// Nobody is watching: every request expires.
pub struct NoExpert;

impl DecisionSource for NoExpert {
    fn next_decision(&mut self, _: &VerificationRequest, _: f64) -> Option<Decision> {
        None
    }
}

/// Hands out queued decisions in order, then lets requests expire.
#[derive(Debug, Default)]
pub struct Scripted {
    pub queue: std::collections::VecDeque<Decision>,
    pub outcomes: Vec<std::result::Result<(), DecisionError>>,
}

impl Scripted {
    pub fn new(decisions: impl IntoIterator<Item = Decision>) -> Self {
        Self {
            queue: decisions.into_iter().collect(),
            outcomes: Vec::new(),
        }
    }
}

impl DecisionSource for Scripted {
    fn next_decision(&mut self, _: &VerificationRequest, _: f64) -> Option<Decision> {
        self.queue.pop_front()
    }

    fn outcome(&mut self, _: &VerificationRequest, result: &std::result::Result<(), DecisionError>) {
        self.outcomes.push(result.clone());
    }
}

pub type DecisionReply = std::result::Result<VerificationRequest, DecisionError>;

pub struct DecisionMsg {
    pub request_id: u64,
    pub decision: Decision,
    pub reply: Sender<DecisionReply>,
}

/// Sending half of the decision handoff; cheap to clone.
#[derive(Clone)]
pub struct DecisionHandle(Sender<DecisionMsg>);

impl DecisionHandle {
    /// Submits a decision and blocks until the loop answers or `wait`
    /// elapses.
    pub fn submit(&self, request_id: u64, decision: Decision, wait: Duration) -> DecisionReply {
        let (tx, rx) = mpsc::channel();
        self.0
            .send(DecisionMsg {
                request_id,
                decision,
                reply: tx,
            })
            .map_err(|_| DecisionError::Timeout)?;
        rx.recv_timeout(wait).map_err(|_| DecisionError::Timeout)?
    }
}

/// Decisions arriving over a channel, typically from the gateway. Simulated
/// timeouts are converted to wall time with `wall_per_sim_s`.
pub struct ChannelDecisions {
    rx: Receiver<DecisionMsg>,
    wall_per_sim_s: f64,
    current: Option<(u64, Instant)>,
    reply: Option<Sender<DecisionReply>>,
}

impl ChannelDecisions {
    pub fn new(wall_per_sim_s: f64) -> (Self, DecisionHandle) {
        let (tx, rx) = mpsc::channel();
        (
            Self {
                rx,
                wall_per_sim_s,
                current: None,
                reply: None,
            },
            DecisionHandle(tx),
        )
    }

    fn refuse(&self, msg: DecisionMsg) {
        let err = match self.current {
            Some((id, _)) if msg.request_id < id => DecisionError::NotPending {
                id: msg.request_id,
                status: "resolved".into(),
            },
            _ => DecisionError::Unknown { id: msg.request_id },
        };
        let _ = msg.reply.send(Err(err));
    }
}

impl DecisionSource for ChannelDecisions {
    fn next_decision(&mut self, req: &VerificationRequest, timeout_s: f64) -> Option<Decision> {
        let deadline = match self.current {
            Some((id, d)) if id == req.id => d,
            _ => {
                let d = Instant::now() + Duration::from_secs_f64((timeout_s * self.wall_per_sim_s).max(0.0));
                self.current = Some((req.id, d));
                d
            }
        };
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(msg) if msg.request_id == req.id => {
                    self.reply = Some(msg.reply);
                    return Some(msg.decision);
                }
                Ok(msg) => self.refuse(msg),
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                    // Drain anything that raced the deadline.
                    while let Ok(msg) = self.rx.try_recv() {
                        let _ = msg.reply.send(Err(DecisionError::NotPending {
                            id: msg.request_id,
                            status: "expired".into(),
                        }));
                    }
                    return None;
                }
            }
        }
    }

    fn outcome(&mut self, req: &VerificationRequest, result: &std::result::Result<(), DecisionError>) {
        if let Some(tx) = self.reply.take() {
            let _ = tx.send(result.clone().map(|_| req.clone()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::safety::{Scope, Verdict, REPORT_SCHEMA_VERSION};

    fn report(id: &str, verdict: Verdict) -> EvaluationReport {
        EvaluationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            candidate_id: id.into(),
            projected_action: ControlAction::uniform(7.0, 22.0, 0.85, 2),
            energy_kwh: 1.0,
            min_inlet_c: Some(22.0),
            max_inlet_c: Some(23.0),
            min_rh_pct: Some(40.0),
            max_rh_pct: Some(45.0),
            predicted_return: -1.0,
            sla_compliant: verdict != Verdict::Filtered,
            member_violation: false,
            verdict,
            diagnostic: None,
        }
    }

    fn request() -> VerificationRequest {
        let sel = Selection {
            action: ControlAction::uniform(7.0, 21.0, 0.7, 2),
            selected_id: "q".into(),
            fallback: false,
            reports: vec![report("q", Verdict::Selected)],
        };
        VerificationRequest::new(1, 0, 0.0, &sel)
    }

    fn accept(a: &ControlAction) -> Result<Selection> {
        Ok(Selection {
            action: a.clone(),
            selected_id: "expert".into(),
            fallback: false,
            reports: vec![report("expert", Verdict::Selected)],
        })
    }

    fn refuse(a: &ControlAction) -> Result<Selection> {
        Ok(Selection {
            action: a.clone(),
            selected_id: "baseline".into(),
            fallback: true,
            reports: vec![report("expert", Verdict::Filtered)],
        })
    }

    #[test]
    fn approve_then_second_decision_is_rejected() {
        let b = ActionBounds::for_scope(Scope::CrahChw, 2);
        let mut r = request();
        r.resolve(&Decision::approve(), &b, &accept).unwrap();
        assert_eq!(r.status, VerificationStatus::Approved);
        assert_eq!(r.actor.as_deref(), Some("operator"));
        let err = r.resolve(&Decision::fallback(), &b, &accept).unwrap_err();
        assert!(matches!(err, DecisionError::NotPending { .. }));
        assert!(r.expire().is_err());
        assert_eq!(r.status, VerificationStatus::Approved);
    }

    #[test]
    fn modified_action_is_projected_before_evaluation() {
        let b = ActionBounds::for_scope(Scope::CrahChw, 2);
        let mut r = request();
        let seen = std::sync::Mutex::new(None);
        let check = |a: &ControlAction| {
            *seen.lock().unwrap() = Some(a.clone());
            accept(a)
        };
        r.resolve(&Decision::modify(ControlAction::uniform(7.0, 21.0, 1.3, 2)), &b, &check)
            .unwrap();
        let want = ControlAction::uniform(7.0, 21.0, 1.0, 2);
        assert_eq!(seen.lock().unwrap().as_ref(), Some(&want));
        assert_eq!(r.status, VerificationStatus::Modified { action: want });
    }

    #[test]
    fn failing_modification_leaves_request_pending() {
        let b = ActionBounds::for_scope(Scope::CrahChw, 2);
        let mut r = request();
        let err = r
            .resolve(&Decision::modify(ControlAction::uniform(7.0, 26.0, 0.3, 2)), &b, &refuse)
            .unwrap_err();
        match err {
            DecisionError::Rejected { report, .. } => assert_eq!(report.unwrap().candidate_id, "expert"),
            e => panic!("unexpected {e:?}"),
        }
        assert!(r.is_pending());
        let bad_dim = Decision::modify(ControlAction::uniform(7.0, 22.0, 0.8, 3));
        assert!(matches!(r.resolve(&bad_dim, &b, &accept), Err(DecisionError::Invalid { .. })));
        r.expire().unwrap();
        assert_eq!(r.status, VerificationStatus::Expired);
    }

    #[test]
    fn decision_json_shape() {
        let d: Decision = serde_json::from_str(r#"{"decision":"approve"}"#).unwrap();
        assert_eq!(d, Decision::approve());
        let d: Decision = serde_json::from_str(
            r#"{"decision":"modify","action":{"chw_supply_setpoint":7.0,"crah_sat_setpoint":[22.0],"crah_fan_ratio":[0.8]},"actor":"ana","notes":"hot day"}"#,
        )
        .unwrap();
        assert_eq!(d.actor, "ana");
        assert!(matches!(d.kind, DecisionKind::Modify { .. }));
        assert!(serde_json::from_str::<Decision>(r#"{"decision":"maybe"}"#).is_err());
        let v = serde_json::to_value(request()).unwrap();
        assert_eq!(v["status"], "pending");
        assert_eq!(v["schema_version"], 1);
    }

    #[test]
    fn channel_handoff_answers_through_reply() {
        let (mut src, handle) = ChannelDecisions::new(1.0);
        let req = request();
        let t = std::thread::spawn(move || {
            let wrong = handle.submit(9, Decision::approve(), Duration::from_secs(5));
            let right = handle.submit(1, Decision::approve(), Duration::from_secs(5));
            (wrong, right)
        });
        let b = ActionBounds::for_scope(Scope::CrahChw, 2);
        let mut r = req.clone();
        let d = src.next_decision(&r, 30.0).expect("decision");
        let res = r.resolve(&d, &b, &accept);
        src.outcome(&r, &res);
        let (wrong, right) = t.join().unwrap();
        assert!(matches!(wrong, Err(DecisionError::Unknown { id: 9 })));
        assert_eq!(right.unwrap().status, VerificationStatus::Approved);
    }

    #[test]
    fn channel_times_out() {
        let (mut src, _handle) = ChannelDecisions::new(0.001);
        assert!(src.next_decision(&request(), 10.0).is_none());
    }
}
