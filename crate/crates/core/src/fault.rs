//! Exception taxonomy and recovery policy.
//!
//! | runtime event                         | kind                      |
//! |---------------------------------------|---------------------------|
//! | worker crash, unreachable worker      | `ServiceFailure`          |
//! | runner exited non-zero                | `ServiceFailure`          |
//! | no EPTR within the timeout budget     | `TaskTimeout`             |
//! | lease race, stale proposal            | `AllocationConflict`      |
//! | report missing required fields        | `OutputStandardViolation` |
//! | no cloud, or no capacity ever, for a technique | `TechniqueUnavailable` |
//! | product finished past its deadline    | `DeadlineExceeded`        |
//! | anything else                         | `ServiceFailure`          |
//!
//! Recovery, first matching row wins:
//!
//! | kind                      | condition                                   | action        |
//! |---------------------------|---------------------------------------------|---------------|
//! | `TaskTimeout`             | attempts < max_retries                      | `Retry`       |
//! | `OutputStandardViolation` | attempts < max_retries                      | `Retry`       |
//! | `ServiceFailure`          | attempts < max_retries, free sibling        | `Reassign`    |
//! | `ServiceFailure`          | attempts < max_retries, cloud_size < K      | `SpawnClone`  |
//! | `ServiceFailure`          | attempts < max_retries, nothing left        | `AbortCloud`  |
//! | `AllocationConflict`      | always                                      | `Retry`       |
//! | `DeadlineExceeded`        | always                                      | `Continue`    |
//! | anything else             |                                             | `AbortTask`   |

use serde::{Deserialize, Serialize};

use crate::model::{CloudId, ProductId, TaskId, Tick};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExceptionKind {
    ServiceFailure,
    TaskTimeout,
    AllocationConflict,
    OutputStandardViolation,
    TechniqueUnavailable,
    DeadlineExceeded,
}

impl ExceptionKind {
    pub const ALL: [ExceptionKind; 6] = [
        ExceptionKind::ServiceFailure,
        ExceptionKind::TaskTimeout,
        ExceptionKind::AllocationConflict,
        ExceptionKind::OutputStandardViolation,
        ExceptionKind::TechniqueUnavailable,
        ExceptionKind::DeadlineExceeded,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RecoveryAction {
    /// Run again on the same service (or re-negotiate, for lease races).
    Retry,
    /// Move to a sibling service of the same cloud.
    Reassign,
    /// Spawn a clone in the cloud, then move the work there.
    SpawnClone,
    AbortTask,
    AbortCloud,
    /// Nothing to recover; work proceeds.
    Continue,
}

/// Something that went wrong at runtime, before classification.
#[derive(Clone, Debug, PartialEq)]
pub enum RuntimeEvent {
    WorkerCrash,
    WorkerUnreachable,
    RunnerExit {
        status: Option<i32>,
    },
    /// No report for a task `elapsed` ticks after dispatch.
    ReportOverdue {
        elapsed: Tick,
        est_duration: Tick,
    },
    LeaseRace,
    StaleProposal,
    NonconformingReport {
        missing: Vec<String>,
    },
    NoCloudForTechnique,
    DeadlinePassed {
        elapsed: Tick,
        deadline: Tick,
    },
    Other(String),
}

/// Total mapping from runtime events to exception kinds.
pub fn classify(event: &RuntimeEvent) -> ExceptionKind {
    match event {
        RuntimeEvent::WorkerCrash
        | RuntimeEvent::WorkerUnreachable
        | RuntimeEvent::RunnerExit { .. } => ExceptionKind::ServiceFailure,
        RuntimeEvent::ReportOverdue { .. } => ExceptionKind::TaskTimeout,
        RuntimeEvent::LeaseRace | RuntimeEvent::StaleProposal => ExceptionKind::AllocationConflict,
        RuntimeEvent::NonconformingReport { .. } => ExceptionKind::OutputStandardViolation,
        RuntimeEvent::NoCloudForTechnique => ExceptionKind::TechniqueUnavailable,
        RuntimeEvent::DeadlinePassed { .. } => ExceptionKind::DeadlineExceeded,
        RuntimeEvent::Other(_) => ExceptionKind::ServiceFailure,
    }
}

/// Tunables for the recovery policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPolicy {
    pub max_retries: u32,
    /// A task is overdue once its execution exceeds this multiple of its
    /// estimated duration.
    pub timeout_factor: u64,
}

impl Default for FaultPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            timeout_factor: 2,
        }
    }
}

impl FaultPolicy {
    /// The overdue event for a task that has been running `elapsed` ticks,
    /// if it has strictly exceeded its budget.
    pub fn check_overdue(&self, elapsed: Tick, est_duration: Tick) -> Option<RuntimeEvent> {
        (elapsed > self.timeout_factor * est_duration).then_some(RuntimeEvent::ReportOverdue {
            elapsed,
            est_duration,
        })
    }
}

/// What the decision needs to know about the affected task and cloud.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryContext {
    /// Re-executions already made for the task.
    pub attempts: u32,
    /// Live services in the cloud other than the one that failed.
    pub free_siblings: usize,
    pub cloud_size: usize,
    pub max_services: usize,
}

pub fn decide_recovery(
    kind: ExceptionKind,
    ctx: &RecoveryContext,
    policy: &FaultPolicy,
) -> RecoveryAction {
    let retry_left = ctx.attempts < policy.max_retries;
    match kind {
        ExceptionKind::TaskTimeout | ExceptionKind::OutputStandardViolation if retry_left => {
            RecoveryAction::Retry
        }
        ExceptionKind::ServiceFailure if retry_left => {
            if ctx.free_siblings > 0 {
                RecoveryAction::Reassign
            } else if ctx.cloud_size < ctx.max_services {
                RecoveryAction::SpawnClone
            } else {
                RecoveryAction::AbortCloud
            }
        }
        ExceptionKind::AllocationConflict => RecoveryAction::Retry,
        ExceptionKind::DeadlineExceeded => RecoveryAction::Continue,
        _ => RecoveryAction::AbortTask,
    }
}

/// One entry of the append-only exception log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub time: Tick,
    pub kind: ExceptionKind,
    /// Service, cloud or product the fault is about.
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product_id: Option<ProductId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_id: Option<CloudId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<TaskId>,
    pub action: RecoveryAction,
    pub attempt: u32,
}

/// Append-only fault log.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FaultLog(Vec<FaultRecord>);

impl FaultLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: FaultRecord) {
        self.0.push(record);
    }

    pub fn records(&self) -> &[FaultRecord] {
        &self.0
    }

    pub fn for_product<'a>(
        &'a self,
        product: &'a ProductId,
    ) -> impl Iterator<Item = &'a FaultRecord> + 'a {
        self.0
            .iter()
            .filter(move |r| r.product_id.as_ref() == Some(product))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
