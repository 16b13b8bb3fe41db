//! Deterministic discrete-event network that carries the whole protocol
//! between consumers, Service Managers, Testing Clouds and Testing Services.
//!
//! Events run in `(time, seq)` order, where `seq` is insertion order. Every
//! message hop costs the scenario's fixed latency. Injected failures and
//! recoveries are scheduled before anything else, so at a given tick they
//! take effect before any message delivered at that tick.

mod engine;
pub mod generate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{Etr, FinalReport, OutputStandard};
use crate::execution::Eptr;
use crate::fault::{FaultPolicy, FaultRecord};
use crate::model::{
    validate_request, validate_technique, CloudId, CloudLease, ConsumerRequest, ProductId,
    ServiceId, TaskId, TechniqueId, TechniqueSpec, TestingCloud, TestingService, Tick,
};
use crate::scheduler::{Assignment, CloneDecision, WorkloadEstimate};

pub use engine::run_simulation;

pub const TRACE_VERSION: &str = "v1";

fn default_latency() -> Tick {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub service_id: ServiceId,
    #[serde(default = "unit_capacity")]
    pub capacity: f64,
}

fn unit_capacity() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudSpec {
    pub cloud_id: CloudId,
    pub technique_id: TechniqueId,
    pub max_services: usize,
    pub services: Vec<ServiceSpec>,
}

impl CloudSpec {
    pub fn to_cloud(&self) -> TestingCloud {
        TestingCloud {
            cloud_id: self.cloud_id.clone(),
            technique_id: self.technique_id.clone(),
            max_services: self.max_services,
            services: self
                .services
                .iter()
                .map(|s| {
                    TestingService::new(s.service_id.clone(), self.technique_id.clone(), s.capacity)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub clouds: Vec<CloudSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedRequest {
    pub arrival: Tick,
    pub request: ConsumerRequest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    Fail,
    Recover,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureInjection {
    pub time: Tick,
    pub service_id: ServiceId,
    pub action: InjectionKind,
}

/// Everything a simulated run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub catalog: Vec<TechniqueSpec>,
    pub topology: Topology,
    pub requests: Vec<TimedRequest>,
    #[serde(default)]
    pub failure_injections: Vec<FailureInjection>,
    /// Ticks per message hop.
    #[serde(default = "default_latency")]
    pub latency: Tick,
    #[serde(default)]
    pub policy: FaultPolicy,
    #[serde(default)]
    pub output_standard: OutputStandard,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("scenario invalid: {0}")]
    ScenarioInvalid(String),
    #[error("invariant violated at tick {time}: {detail}")]
    Invariant { time: Tick, detail: String },
    #[error("simulation did not quiesce within {0} events")]
    NoQuiescence(u64),
}

impl Scenario {
    /// First violated constraint, if any.
    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |msg: String| Err(SimError::ScenarioInvalid(msg));
        if self.latency == 0 {
            return invalid("latency must be at least 1 tick".into());
        }
        if self.policy.timeout_factor == 0 {
            return invalid("policy.timeout_factor must be at least 1".into());
        }
        if self.output_standard.required_fields.is_empty() {
            return invalid("output_standard.required_fields must not be empty".into());
        }
        let mut techniques = BTreeSet::new();
        for t in &self.catalog {
            if !techniques.insert(&t.technique_id) {
                return invalid(format!("duplicate technique {} in catalog", t.technique_id));
            }
            if let Err(e) = validate_technique(t) {
                return invalid(format!("catalog: {e}"));
            }
        }
        let mut clouds = BTreeSet::new();
        let mut services = BTreeSet::new();
        for c in &self.topology.clouds {
            if !clouds.insert(&c.cloud_id) {
                return invalid(format!("duplicate cloud id {}", c.cloud_id));
            }
            if !techniques.contains(&c.technique_id) {
                return invalid(format!(
                    "cloud {} serves unknown technique {}",
                    c.cloud_id, c.technique_id
                ));
            }
            for s in &c.services {
                if !services.insert(&s.service_id) {
                    return invalid(format!("duplicate service id {}", s.service_id));
                }
            }
            if let Err(e) = c.to_cloud().check() {
                return invalid(e.to_string());
            }
        }
        let mut products = BTreeSet::new();
        let mut last_arrival = 0;
        for r in &self.requests {
            let id = &r.request.product.product_id;
            if r.arrival < last_arrival {
                return invalid(format!(
                    "arrival of {id} at {} is earlier than the previous request",
                    r.arrival
                ));
            }
            last_arrival = r.arrival;
            if !products.insert(id) {
                return invalid(format!("duplicate product id {id}"));
            }
            if let Err(e) = validate_request(&r.request, &self.catalog) {
                return invalid(format!("request {id}: {e}"));
            }
        }
        for f in &self.failure_injections {
            if !services.contains(&f.service_id) {
                return invalid(format!(
                    "failure injection names unknown service id {}",
                    f.service_id
                ));
            }
        }
        Ok(())
    }
}

/// A network endpoint.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "role", content = "id", rename_all = "snake_case")]
pub enum Node {
    Consumer(ProductId),
    Manager(ProductId),
    Cloud(CloudId),
    Service(ServiceId),
    /// Failure detector that reports crashes to lease holders.
    Monitor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Message {
    RequestTesting {
        product_id: ProductId,
    },
    ProposeCloud {
        product_id: ProductId,
        cloud_id: CloudId,
        round: u32,
    },
    AcceptProposal {
        product_id: ProductId,
        cloud_id: CloudId,
        round: u32,
    },
    RejectProposal {
        product_id: ProductId,
        cloud_id: CloudId,
        round: u32,
    },
    AssignTask {
        product_id: ProductId,
        cloud_id: CloudId,
        service_id: ServiceId,
        task_id: TaskId,
        attempt: u32,
    },
    #[serde(rename = "EPTRMsg")]
    EptrMsg {
        product_id: ProductId,
        attempt: u32,
        eptr: Eptr,
    },
    #[serde(rename = "ETRMsg")]
    EtrMsg {
        product_id: ProductId,
        etr: Etr,
    },
    FailureNotice {
        service_id: ServiceId,
    },
    ReleaseLease {
        product_id: ProductId,
        cloud_id: CloudId,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub seq: u64,
    pub sent_at: Tick,
    pub deliver_at: Tick,
    pub from: Node,
    pub to: Node,
    pub message: Message,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Completed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TimelineEntry {
    RequestArrived {
        time: Tick,
        product_id: ProductId,
    },
    ServiceUp {
        time: Tick,
        service_id: ServiceId,
        cloud_id: CloudId,
        clone: bool,
    },
    InjectFailure {
        time: Tick,
        service_id: ServiceId,
    },
    Recover {
        time: Tick,
        service_id: ServiceId,
    },
    LeaseGranted {
        time: Tick,
        product_id: ProductId,
        clouds: Vec<CloudLease>,
    },
    LeaseReleased {
        time: Tick,
        product_id: ProductId,
        clouds: Vec<CloudLease>,
    },
    /// One run of a task on a service, logged when it ends or is cut short.
    Execution {
        service_id: ServiceId,
        product_id: ProductId,
        task_id: TaskId,
        attempt: u32,
        start: Tick,
        end: Tick,
        completed: bool,
    },
    TaskFinished {
        time: Tick,
        product_id: ProductId,
        cloud_id: CloudId,
        task_id: TaskId,
        case_count: u64,
        status: TaskStatus,
    },
}

/// How one cloud's share of a product was sized and distributed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub time: Tick,
    pub product_id: ProductId,
    pub cloud_id: CloudId,
    pub technique_id: TechniqueId,
    pub estimate: WorkloadEstimate,
    pub clones: CloneDecision,
    pub spawned: Vec<ServiceId>,
    pub assignment: Assignment,
}

/// The deterministic record of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub seed: u64,
    pub latency: Tick,
    /// Tick of the last processed event.
    pub end_time: Tick,
    pub messages: Vec<MessageRecord>,
    pub timeline: Vec<TimelineEntry>,
    pub plans: Vec<PlanRecord>,
    pub faults: Vec<FaultRecord>,
    /// Number of registry invariant checks performed, one per event.
    pub invariant_checks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ProductOutcome {
    Reported {
        completed_at: Tick,
        report: FinalReport,
    },
    Failed {
        product_id: ProductId,
        fault: FaultRecord,
    },
}

impl ProductOutcome {
    pub fn product_id(&self) -> &ProductId {
        match self {
            ProductOutcome::Reported { report, .. } => &report.product_id,
            ProductOutcome::Failed { product_id, .. } => product_id,
        }
    }

    pub fn report(&self) -> Option<&FinalReport> {
        match self {
            ProductOutcome::Reported { report, .. } => Some(report),
            ProductOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    pub total_ticks: Tick,
    pub up_ticks: Tick,
    pub busy_ticks: Tick,
    pub availability: f64,
    pub utilization: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub makespan: Tick,
    pub services: BTreeMap<ServiceId, ServiceMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub version: String,
    pub trace: Trace,
    pub outcomes: Vec<ProductOutcome>,
    pub metrics: Metrics,
}

impl SimResult {
    pub fn reports(&self) -> impl Iterator<Item = &FinalReport> {
        self.outcomes.iter().filter_map(ProductOutcome::report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    /// Accepted EPTRs: the ones carried by `EPTRMsg`s whose task completed.
    pub fn delivered_eptrs(&self) -> impl Iterator<Item = &Eptr> {
        self.trace.messages.iter().filter_map(|m| match &m.message {
            Message::EptrMsg { eptr, .. } => Some(eptr),
            _ => None,
        })
    }
}

/// Availability and utilization per service, plus makespan (first request
/// arrival to the last EPTR finish).
pub fn compute_metrics(trace: &Trace) -> Metrics {
    let first_arrival = trace
        .timeline
        .iter()
        .filter_map(|e| match e {
            TimelineEntry::RequestArrived { time, .. } => Some(*time),
            _ => None,
        })
        .min();
    let last_finish = trace
        .messages
        .iter()
        .filter_map(|m| match &m.message {
            Message::EptrMsg { eptr, .. } => Some(eptr.finished_at),
            _ => None,
        })
        .max();
    let makespan = match (first_arrival, last_finish) {
        (Some(a), Some(f)) => f.saturating_sub(a),
        _ => 0,
    };

    struct Acc {
        created: Tick,
        down_since: Option<Tick>,
        down: Tick,
        busy: Tick,
    }
    let end = trace.end_time;
    let mut acc: BTreeMap<ServiceId, Acc> = BTreeMap::new();
    for e in &trace.timeline {
        match e {
            TimelineEntry::ServiceUp {
                time, service_id, ..
            } => {
                acc.insert(
                    service_id.clone(),
                    Acc {
                        created: *time,
                        down_since: None,
                        down: 0,
                        busy: 0,
                    },
                );
            }
            TimelineEntry::InjectFailure { time, service_id } => {
                if let Some(a) = acc.get_mut(service_id) {
                    a.down_since.get_or_insert(*time);
                }
            }
            TimelineEntry::Recover { time, service_id } => {
                if let Some(a) = acc.get_mut(service_id) {
                    if let Some(since) = a.down_since.take() {
                        a.down += time.saturating_sub(since);
                    }
                }
            }
            TimelineEntry::Execution {
                service_id,
                start,
                end,
                ..
            } => {
                if let Some(a) = acc.get_mut(service_id) {
                    a.busy += end.saturating_sub(*start);
                }
            }
            _ => {}
        }
    }
    let services = acc
        .into_iter()
        .map(|(id, a)| {
            let total = end.saturating_sub(a.created);
            let down = a.down + a.down_since.map_or(0, |s| end.saturating_sub(s));
            let up = total.saturating_sub(down);
            let m = ServiceMetrics {
                total_ticks: total,
                up_ticks: up,
                busy_ticks: a.busy,
                availability: if total == 0 {
                    1.0
                } else {
                    up as f64 / total as f64
                },
                utilization: if up == 0 {
                    0.0
                } else {
                    a.busy as f64 / up as f64
                },
            };
            (id, m)
        })
        .collect();
    Metrics { makespan, services }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn up(service: &str, time: Tick) -> TimelineEntry {
        TimelineEntry::ServiceUp {
            time,
            service_id: service.into(),
            cloud_id: "C1".into(),
            clone: false,
        }
    }

    fn exec(service: &str, start: Tick, end: Tick) -> TimelineEntry {
        TimelineEntry::Execution {
            service_id: service.into(),
            product_id: "P1".into(),
            task_id: "t".into(),
            attempt: 0,
            start,
            end,
            completed: true,
        }
    }

    #[test]
    fn always_up_service_is_fully_available() {
        let trace = Trace {
            end_time: 60,
            timeline: vec![up("s1", 0), exec("s1", 10, 40)],
            ..Trace::default()
        };
        let m = compute_metrics(&trace);
        assert_eq!(m.services[&ServiceId::from("s1")].availability, 1.0);
        assert_eq!(m.services[&ServiceId::from("s1")].utilization, 0.5);
    }

    #[test]
    fn downtime_reduces_availability() {
        let trace = Trace {
            end_time: 100,
            timeline: vec![
                up("s1", 0),
                TimelineEntry::InjectFailure {
                    time: 20,
                    service_id: "s1".into(),
                },
                TimelineEntry::Recover {
                    time: 40,
                    service_id: "s1".into(),
                },
                TimelineEntry::InjectFailure {
                    time: 90,
                    service_id: "s1".into(),
                },
            ],
            ..Trace::default()
        };
        let s = &compute_metrics(&trace).services[&ServiceId::from("s1")];
        assert_eq!((s.up_ticks, s.total_ticks), (70, 100));
        assert!((s.availability - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_trace_has_zero_metrics() {
        assert_eq!(compute_metrics(&Trace::default()), Metrics::default());
    }
}
