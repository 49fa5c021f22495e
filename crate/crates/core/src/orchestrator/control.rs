//! Run phases, pause/stop signalling and the approval desk shared between
//! the loop thread and request handlers.

use std::sync::{Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::ActionProposal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Running,
    Paused,
    WaitingApproval,
    Terminated,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::Running => "running",
            Phase::Paused => "paused",
            Phase::WaitingApproval => "waiting_approval",
            Phase::Terminated => "terminated",
        }
    }

    /// A loop or step currently owns the orchestrator.
    pub fn is_active(self) -> bool {
        matches!(self, Phase::Running | Phase::Paused | Phase::WaitingApproval)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot {action} while {}", phase.as_str())]
pub struct TransitionError {
    pub action: &'static str,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub decision: Decision,
    pub actor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingApproval {
    pub iteration: u32,
    pub proposal: ActionProposal,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApprovalError {
    #[error("no approval is pending")]
    NoPending,
    #[error("iteration {requested} is not awaiting approval (pending: {pending})")]
    UnknownIteration { requested: u32, pending: u32 },
}

impl ApprovalError {
    pub fn code(&self) -> &'static str {
        match self {
            ApprovalError::NoPending => "no_pending_approval",
            ApprovalError::UnknownIteration { .. } => "unknown_iteration",
        }
    }
}

#[derive(Debug, Default)]
struct DeskState {
    pending: Option<PendingApproval>,
    resolution: Option<Resolution>,
    cancelled: bool,
}

/// Holds at most one proposal awaiting a human decision.
#[derive(Debug, Default)]
pub struct ApprovalDesk {
    inner: Mutex<DeskState>,
    cv: Condvar,
}

impl ApprovalDesk {
    fn lock(&self) -> MutexGuard<'_, DeskState> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Publishes `proposal` and blocks until it is resolved. `None` when
    /// the desk was cancelled.
    pub fn submit_and_wait(&self, iteration: u32, proposal: ActionProposal) -> Option<Resolution> {
        let mut s = self.lock();
        if s.cancelled {
            return None;
        }
        s.pending = Some(PendingApproval { iteration, proposal });
        s.resolution = None;
        let mut s = self.cv.wait_while(s, |s| s.resolution.is_none() && !s.cancelled).unwrap_or_else(|e| e.into_inner());
        s.pending = None;
        s.resolution.take()
    }

    pub fn resolve(&self, iteration: u32, decision: Decision, actor: &str) -> Result<(), ApprovalError> {
        let mut s = self.lock();
        let pending = match (&s.pending, &s.resolution) {
            (Some(p), None) => p.iteration,
            _ => return Err(ApprovalError::NoPending),
        };
        if pending != iteration {
            return Err(ApprovalError::UnknownIteration { requested: iteration, pending });
        }
        s.resolution = Some(Resolution { decision, actor: actor.to_string() });
        s.pending = None;
        self.cv.notify_all();
        Ok(())
    }

    pub fn pending(&self) -> Option<PendingApproval> {
        self.lock().pending.clone()
    }

    /// Releases any waiter without a decision; later submissions return
    /// immediately until `reset`.
    pub fn cancel(&self) {
        let mut s = self.lock();
        s.cancelled = true;
        s.pending = None;
        self.cv.notify_all();
    }

    pub fn reset(&self) {
        *self.lock() = DeskState::default();
    }
}

#[derive(Debug)]
struct ControlState {
    phase: Phase,
    pause_requested: bool,
    stop_requested: bool,
}

/// Phase machine: idle → running → (paused | waiting_approval) → terminated.
#[derive(Debug)]
pub struct RunControl {
    inner: Mutex<ControlState>,
    cv: Condvar,
    desk: ApprovalDesk,
}

impl Default for RunControl {
    fn default() -> Self {
        Self {
            inner: Mutex::new(ControlState { phase: Phase::Idle, pause_requested: false, stop_requested: false }),
            cv: Condvar::new(),
            desk: ApprovalDesk::default(),
        }
    }
}

impl RunControl {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, ControlState> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn phase(&self) -> Phase {
        self.lock().phase
    }

    pub fn desk(&self) -> &ApprovalDesk {
        &self.desk
    }

    /// Claims the orchestrator for a run.
    pub fn begin(&self) -> Result<(), TransitionError> {
        self.claim("start a run")
    }

    /// Claims the orchestrator for a single step; returns the phase to
    /// restore afterwards.
    pub fn begin_step(&self) -> Result<Phase, TransitionError> {
        let prev = self.phase();
        self.claim("step")?;
        Ok(prev)
    }

    fn claim(&self, action: &'static str) -> Result<(), TransitionError> {
        let mut s = self.lock();
        if s.phase.is_active() {
            return Err(TransitionError { action, phase: s.phase });
        }
        s.phase = Phase::Running;
        s.pause_requested = false;
        s.stop_requested = false;
        self.desk.reset();
        Ok(())
    }

    pub fn end_step(&self, restore: Phase) {
        let mut s = self.lock();
        s.phase = restore;
        s.stop_requested = false;
        s.pause_requested = false;
    }

    pub fn finish(&self) {
        let mut s = self.lock();
        s.phase = Phase::Terminated;
        s.pause_requested = false;
        self.cv.notify_all();
    }

    pub fn pause(&self) -> Result<(), TransitionError> {
        let mut s = self.lock();
        if s.phase != Phase::Running {
            return Err(TransitionError { action: "pause", phase: s.phase });
        }
        s.pause_requested = true;
        s.phase = Phase::Paused;
        Ok(())
    }

    pub fn resume(&self) -> Result<(), TransitionError> {
        let mut s = self.lock();
        if s.phase != Phase::Paused {
            return Err(TransitionError { action: "resume", phase: s.phase });
        }
        s.pause_requested = false;
        s.phase = Phase::Running;
        self.cv.notify_all();
        Ok(())
    }

    /// Asks the active run to stop at its next checkpoint, releasing any
    /// pending approval.
    pub fn stop(&self) -> Result<(), TransitionError> {
        let mut s = self.lock();
        if !s.phase.is_active() {
            return Err(TransitionError { action: "stop", phase: s.phase });
        }
        s.stop_requested = true;
        s.pause_requested = false;
        self.desk.cancel();
        self.cv.notify_all();
        Ok(())
    }

    pub fn stop_requested(&self) -> bool {
        self.lock().stop_requested
    }

    /// Blocks while paused. Returns false when the run should stop.
    pub fn checkpoint(&self) -> bool {
        let s = self.lock();
        let s = self.cv.wait_while(s, |s| s.pause_requested && !s.stop_requested).unwrap_or_else(|e| e.into_inner());
        !s.stop_requested
    }

    pub(crate) fn set_waiting(&self, waiting: bool) {
        let mut s = self.lock();
        match (waiting, s.phase) {
            (true, Phase::Running) => s.phase = Phase::WaitingApproval,
            (false, Phase::WaitingApproval) => s.phase = Phase::Running,
            _ => {}
        }
    }
}
