use std::collections::{BTreeMap, BTreeSet, VecDeque};

use log::{debug, trace};

use super::{
    compute_metrics, FailureInjection, InjectionKind, Message, MessageRecord, Node, PlanRecord,
    ProductOutcome, Scenario, SimError, SimResult, TaskStatus, TimelineEntry, Trace, TRACE_VERSION,
};
use crate::aggregation::{integrate_etrs, merge_eptrs, validate_output_standard, CloudRef, Etr};
use crate::allocation::{AllocationError, CloudProposal, Lease};
use crate::execution::{run_task, Eptr, ExecError, ServiceContext, SimulatedRunner};
use crate::fault::{
    classify, decide_recovery, ExceptionKind, FaultRecord, RecoveryAction, RecoveryContext,
    RuntimeEvent,
};
use crate::model::{
    validate_request, CloudId, ManagerDescriptor, ManagerId, ProductId, Registry, ServiceId,
    ServiceState, TaskId, TechniqueId, TechniqueSpec, Tick, ValidatedRequest,
};
use crate::scheduler::{
    build_tasks, decide_clone_count, estimate_workload, partition_load, TestTask,
};

/// Hard stop for runaway scenarios. The fault policy bounds every retry
/// loop, so a valid scenario never gets close.
const MAX_EVENTS: u64 = 20_000_000;

/// Run a scenario to quiescence.
pub fn run_simulation(scenario: &Scenario) -> Result<SimResult, SimError> {
    scenario.validate()?;
    let mut sim = Sim::new(scenario)?;
    sim.run()?;
    let mut trace = sim.trace;
    trace.end_time = sim.now;
    let metrics = compute_metrics(&trace);
    Ok(SimResult {
        version: TRACE_VERSION.to_string(),
        trace,
        outcomes: sim.outcomes,
        metrics,
    })
}

enum Event {
    Inject(usize),
    Arrival(usize),
    Deliver(usize),
    ExecDone {
        service: ServiceId,
        run_id: u64,
    },
    Timeout {
        product: ProductId,
        task: TaskId,
        attempt: u32,
    },
    Wake(ProductId),
}

struct Job {
    product: ProductId,
    cloud: CloudId,
    task: TestTask,
    attempt: u32,
    avg_case_time: Tick,
    defect_density: f64,
}

struct Running {
    job: Job,
    start: Tick,
    run_id: u64,
    eptr: Option<Eptr>,
}

#[derive(Default)]
struct Worker {
    inbox: VecDeque<Job>,
    current: Option<Running>,
    next_run: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Negotiating,
    Parked,
    Running,
    Done,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum TaskState {
    Queued,
    Dispatched {
        service: ServiceId,
        attempt: u32,
        at: Tick,
    },
    Completed,
    Aborted,
}

impl TaskState {
    fn is_terminal(&self) -> bool {
        matches!(self, TaskState::Completed | TaskState::Aborted)
    }
}

struct TaskRun {
    task: TestTask,
    /// Re-executions already made.
    attempts: u32,
    state: TaskState,
}

struct CloudRun {
    technique: TechniqueSpec,
    max_services: usize,
    started_at: Tick,
    tasks: BTreeMap<TaskId, TaskRun>,
    queues: BTreeMap<ServiceId, VecDeque<TaskId>>,
    in_flight: BTreeMap<ServiceId, TaskId>,
    eptrs: Vec<Eptr>,
    etr: Option<Etr>,
    aborted: bool,
    finished: bool,
}

impl CloudRun {
    fn load_of(&self, service: &ServiceId) -> Tick {
        let queued: Tick = self.queues.get(service).map_or(0, |q| {
            q.iter().map(|t| self.tasks[t].task.est_duration).sum()
        });
        let running = self
            .in_flight
            .get(service)
            .map_or(0, |t| self.tasks[t].task.est_duration);
        queued + running
    }

    fn pending_load(&self) -> Tick {
        self.tasks
            .values()
            .filter(|t| !t.state.is_terminal())
            .map(|t| t.task.est_duration)
            .sum()
    }
}

struct Manager {
    id: ManagerId,
    request: ValidatedRequest,
    phase: Phase,
    round: u32,
    proposals: Vec<CloudProposal>,
    awaiting: BTreeSet<CloudId>,
    rejected_by: Vec<CloudId>,
    lease: Option<Lease>,
    /// Clouds in lease order.
    order: Vec<CloudId>,
    clouds: BTreeMap<CloudId, CloudRun>,
    known_failed: BTreeSet<ServiceId>,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    registry: Registry,
    now: Tick,
    next_seq: u64,
    queue: BTreeMap<(Tick, u64), Event>,
    processed: u64,
    managers: BTreeMap<ProductId, Manager>,
    workers: BTreeMap<ServiceId, Worker>,
    fail_times: BTreeMap<ServiceId, BTreeSet<Tick>>,
    /// Pending timeout per dispatched task, so it can be cancelled.
    timers: BTreeMap<(ProductId, TaskId), (Tick, u64)>,
    parked: VecDeque<ProductId>,
    trace: Trace,
    outcomes: Vec<ProductOutcome>,
}

/// Product, cloud and task a fault record is attributed to.
type Scope<'s> = (
    Option<&'s ProductId>,
    Option<&'s CloudId>,
    Option<&'s TaskId>,
);

fn manager_id(product: &ProductId) -> ManagerId {
    ManagerId::from(format!("sm-{product}"))
}

impl<'a> Sim<'a> {
    fn new(scenario: &'a Scenario) -> Result<Self, SimError> {
        let registry = Registry::with_clouds(scenario.topology.clouds.iter().map(|c| c.to_cloud()))
            .map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
        let mut sim = Sim {
            scenario,
            registry,
            now: 0,
            next_seq: 0,
            queue: BTreeMap::new(),
            processed: 0,
            managers: BTreeMap::new(),
            workers: BTreeMap::new(),
            fail_times: BTreeMap::new(),
            timers: BTreeMap::new(),
            parked: VecDeque::new(),
            trace: Trace {
                seed: scenario.seed,
                latency: scenario.latency,
                ..Trace::default()
            },
            outcomes: Vec::new(),
        };
        for c in &scenario.topology.clouds {
            for s in &c.services {
                sim.workers.insert(s.service_id.clone(), Worker::default());
                sim.trace.timeline.push(TimelineEntry::ServiceUp {
                    time: 0,
                    service_id: s.service_id.clone(),
                    cloud_id: c.cloud_id.clone(),
                    clone: false,
                });
            }
        }
        // Injections first so they win ties against everything else.
        for (i, f) in scenario.failure_injections.iter().enumerate() {
            if f.action == InjectionKind::Fail {
                sim.fail_times
                    .entry(f.service_id.clone())
                    .or_default()
                    .insert(f.time);
            }
            sim.schedule(f.time, Event::Inject(i));
        }
        for (i, r) in scenario.requests.iter().enumerate() {
            sim.schedule(r.arrival, Event::Arrival(i));
        }
        Ok(sim)
    }

    fn schedule(&mut self, at: Tick, event: Event) {
        self.queue.insert((at, self.next_seq), event);
        self.next_seq += 1;
    }

    fn invariant(&self, detail: impl Into<String>) -> SimError {
        SimError::Invariant {
            time: self.now,
            detail: detail.into(),
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        while let Some(((at, _), event)) = self.queue.pop_first() {
            self.processed += 1;
            if self.processed > MAX_EVENTS {
                return Err(SimError::NoQuiescence(MAX_EVENTS));
            }
            self.now = at;
            match event {
                Event::Inject(i) => self.on_inject(i)?,
                Event::Arrival(i) => self.on_arrival(i)?,
                Event::Deliver(i) => self.on_deliver(i)?,
                Event::ExecDone { service, run_id } => self.on_exec_done(&service, run_id),
                Event::Timeout {
                    product,
                    task,
                    attempt,
                } => self.on_timeout(&product, &task, attempt)?,
                Event::Wake(p) => {
                    if self
                        .managers
                        .get(&p)
                        .is_some_and(|m| m.phase == Phase::Parked)
                    {
                        self.negotiate(&p)?;
                    }
                }
            }
            if !self.registry.verify_disjointness() {
                return Err(self.invariant("allocations overlap"));
            }
            self.registry
                .check_invariants()
                .map_err(|e| self.invariant(e))?;
            self.trace.invariant_checks += 1;
        }
        // Whoever is still parked can never be served.
        let stuck: Vec<ProductId> = self.parked.drain(..).collect();
        for p in stuck {
            let technique = match self.registry.form_clouds(&self.managers[&p].request) {
                Err(AllocationError::NoCapacity(t) | AllocationError::TechniqueUnavailable(t)) => t,
                _ => self.managers[&p].request.request.techniques[0].clone(),
            };
            self.reject_product(&p, &technique);
        }
        if let Some(m) = self.managers.values().find(|m| m.phase != Phase::Done) {
            return Err(self.invariant(format!("{} stopped in phase {:?}", m.id, m.phase)));
        }
        Ok(())
    }

    fn send(&mut self, from: Node, to: Node, message: Message) {
        let seq = self.trace.messages.len() as u64;
        let deliver_at = self.now + self.scenario.latency;
        trace!("t={} #{seq} {from:?} -> {to:?}: {message:?}", self.now);
        self.trace.messages.push(MessageRecord {
            seq,
            sent_at: self.now,
            deliver_at,
            from,
            to,
            message,
        });
        self.schedule(deliver_at, Event::Deliver(seq as usize));
    }

    fn fault(
        &mut self,
        kind: ExceptionKind,
        subject: impl Into<String>,
        (product, cloud, task): Scope<'_>,
        action: RecoveryAction,
        attempt: u32,
    ) {
        let record = FaultRecord {
            time: self.now,
            kind,
            subject: subject.into(),
            product_id: product.cloned(),
            cloud_id: cloud.cloned(),
            task_id: task.cloned(),
            action,
            attempt,
        };
        debug!("fault {record:?}");
        self.trace.faults.push(record);
    }

    // ---- environment -------------------------------------------------

    fn on_inject(&mut self, index: usize) -> Result<(), SimError> {
        let FailureInjection {
            service_id: s,
            action,
            ..
        } = self.scenario.failure_injections[index].clone();
        match action {
            InjectionKind::Fail => {
                let already = self
                    .registry
                    .find_service(&s)
                    .is_some_and(|(_, svc)| svc.is_failed());
                if already {
                    self.fault(
                        ExceptionKind::ServiceFailure,
                        s.as_str(),
                        (None, None, None),
                        RecoveryAction::Continue,
                        0,
                    );
                    return Ok(());
                }
                let holder = self
                    .registry
                    .fail_service(&s)
                    .map_err(|e| self.invariant(e.to_string()))?;
                self.trace.timeline.push(TimelineEntry::InjectFailure {
                    time: self.now,
                    service_id: s.clone(),
                });
                let worker = self.workers.entry(s.clone()).or_default();
                worker.inbox.clear();
                if let Some(run) = worker.current.take() {
                    self.trace.timeline.push(TimelineEntry::Execution {
                        service_id: s.clone(),
                        product_id: run.job.product.clone(),
                        task_id: run.job.task.task_id.clone(),
                        attempt: run.job.attempt,
                        start: run.start,
                        end: self.now,
                        completed: false,
                    });
                }
                match holder {
                    Some(p)
                        if self
                            .managers
                            .get(&p)
                            .is_some_and(|m| m.phase == Phase::Running) =>
                    {
                        self.send(
                            Node::Monitor,
                            Node::Manager(p),
                            Message::FailureNotice { service_id: s },
                        );
                    }
                    _ => {
                        let cloud = self
                            .registry
                            .find_service(&s)
                            .map(|(c, _)| c.cloud_id.clone());
                        self.fault(
                            ExceptionKind::ServiceFailure,
                            s.as_str(),
                            (None, cloud.as_ref(), None),
                            RecoveryAction::Continue,
                            0,
                        );
                    }
                }
            }
            InjectionKind::Recover => {
                let Ok(holder) = self.registry.recover_service(&s) else {
                    return Ok(());
                };
                self.trace.timeline.push(TimelineEntry::Recover {
                    time: self.now,
                    service_id: s.clone(),
                });
                if let Some(p) = holder {
                    let cloud = self
                        .registry
                        .find_service(&s)
                        .map(|(c, _)| c.cloud_id.clone());
                    if let (Some(m), Some(c)) = (self.managers.get_mut(&p), cloud) {
                        m.known_failed.remove(&s);
                        self.dispatch_cloud(&p, &c);
                    }
                }
                self.wake_parked();
            }
        }
        Ok(())
    }

    fn wake_parked(&mut self) {
        let parked: Vec<ProductId> = self.parked.drain(..).collect();
        for p in parked {
            self.schedule(self.now, Event::Wake(p));
        }
    }

    // ---- consumer side -----------------------------------------------

    fn on_arrival(&mut self, index: usize) -> Result<(), SimError> {
        let request = self.scenario.requests[index].request.clone();
        let validated = validate_request(&request, &self.scenario.catalog)
            .map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
        let p = request.product.product_id.clone();
        let id = manager_id(&p);
        self.trace.timeline.push(TimelineEntry::RequestArrived {
            time: self.now,
            product_id: p.clone(),
        });
        self.registry.register_manager(ManagerDescriptor {
            manager_id: id.clone(),
            product_id: p.clone(),
        });
        self.managers.insert(
            p.clone(),
            Manager {
                id,
                request: validated,
                phase: Phase::Negotiating,
                round: 0,
                proposals: Vec::new(),
                awaiting: BTreeSet::new(),
                rejected_by: Vec::new(),
                lease: None,
                order: Vec::new(),
                clouds: BTreeMap::new(),
                known_failed: BTreeSet::new(),
            },
        );
        self.send(
            Node::Consumer(p.clone()),
            Node::Manager(p.clone()),
            Message::RequestTesting { product_id: p },
        );
        Ok(())
    }

    fn on_deliver(&mut self, index: usize) -> Result<(), SimError> {
        let record = &self.trace.messages[index];
        let (to, message) = (record.to.clone(), record.message.clone());
        match (to, message) {
            (Node::Manager(p), Message::RequestTesting { .. }) => self.negotiate(&p)?,
            (
                Node::Cloud(c),
                Message::ProposeCloud {
                    product_id, round, ..
                },
            ) => {
                let accept = self.registry.lease_holder(&c).is_none()
                    && self
                        .registry
                        .cloud(&c)
                        .is_some_and(|cl| cl.has_free_service());
                let reply = if accept {
                    Message::AcceptProposal {
                        product_id: product_id.clone(),
                        cloud_id: c.clone(),
                        round,
                    }
                } else {
                    Message::RejectProposal {
                        product_id: product_id.clone(),
                        cloud_id: c.clone(),
                        round,
                    }
                };
                self.send(Node::Cloud(c), Node::Manager(product_id), reply);
            }
            (
                Node::Manager(p),
                Message::AcceptProposal {
                    cloud_id, round, ..
                },
            ) => self.on_reply(&p, &cloud_id, round, true)?,
            (
                Node::Manager(p),
                Message::RejectProposal {
                    cloud_id, round, ..
                },
            ) => self.on_reply(&p, &cloud_id, round, false)?,
            (
                Node::Service(s),
                Message::AssignTask {
                    product_id,
                    cloud_id,
                    task_id,
                    attempt,
                    ..
                },
            ) => self.on_assign(&s, &product_id, &cloud_id, &task_id, attempt),
            (Node::Manager(p), Message::EptrMsg { attempt, eptr, .. }) => {
                self.on_eptr(&p, attempt, eptr)?
            }
            (Node::Manager(p), Message::FailureNotice { service_id }) => {
                self.on_failure_notice(&p, &service_id)?
            }
            // Consumers and clouds only take note of reports and releases.
            (Node::Consumer(_), Message::EtrMsg { .. })
            | (Node::Cloud(_), Message::ReleaseLease { .. }) => {}
            (to, message) => {
                return Err(self.invariant(format!("{to:?} cannot handle {message:?}")))
            }
        }
        Ok(())
    }

    // ---- negotiation -------------------------------------------------

    fn negotiate(&mut self, p: &ProductId) -> Result<(), SimError> {
        let formed = self.registry.form_clouds(&self.managers[p].request);
        match formed {
            Ok(proposals) => {
                let m = self.managers.get_mut(p).expect("manager exists");
                m.round += 1;
                m.phase = Phase::Negotiating;
                m.awaiting = proposals
                    .iter()
                    .map(|x| x.candidate_cloud_id.clone())
                    .collect();
                m.rejected_by.clear();
                m.proposals = proposals.clone();
                let round = m.round;
                for x in proposals {
                    self.send(
                        Node::Manager(p.clone()),
                        Node::Cloud(x.candidate_cloud_id.clone()),
                        Message::ProposeCloud {
                            product_id: p.clone(),
                            cloud_id: x.candidate_cloud_id,
                            round,
                        },
                    );
                }
            }
            Err(AllocationError::NoCapacity(_)) => {
                self.managers.get_mut(p).expect("manager exists").phase = Phase::Parked;
                self.parked.push_back(p.clone());
            }
            Err(AllocationError::TechniqueUnavailable(t)) => self.reject_product(p, &t),
            Err(e) => return Err(self.invariant(e.to_string())),
        }
        Ok(())
    }

    fn reject_product(&mut self, p: &ProductId, technique: &TechniqueId) {
        let kind = classify(&RuntimeEvent::NoCloudForTechnique);
        let action = decide_recovery(kind, &RecoveryContext::default(), &self.scenario.policy);
        self.fault(kind, technique.as_str(), (Some(p), None, None), action, 0);
        let fault = self.trace.faults.last().cloned().expect("just logged");
        let m = self.managers.get_mut(p).expect("manager exists");
        m.phase = Phase::Done;
        let id = m.id.clone();
        self.registry.remove_manager(&id);
        self.outcomes.push(ProductOutcome::Failed {
            product_id: p.clone(),
            fault,
        });
    }

    fn on_reply(
        &mut self,
        p: &ProductId,
        c: &CloudId,
        round: u32,
        accepted: bool,
    ) -> Result<(), SimError> {
        let m = self.managers.get_mut(p).expect("manager exists");
        if m.phase != Phase::Negotiating || m.round != round || !m.awaiting.remove(c) {
            return Ok(());
        }
        if !accepted {
            m.rejected_by.push(c.clone());
        }
        if !m.awaiting.is_empty() {
            return Ok(());
        }
        let conflict = |sim: &mut Self, event: RuntimeEvent, cloud: &CloudId| {
            let kind = classify(&event);
            let action = decide_recovery(kind, &RecoveryContext::default(), &sim.scenario.policy);
            sim.fault(
                kind,
                cloud.as_str(),
                (Some(p), Some(cloud), None),
                action,
                round,
            );
        };
        if let Some(first) = m.rejected_by.first().cloned() {
            conflict(self, RuntimeEvent::LeaseRace, &first);
            return self.negotiate(p);
        }
        let (id, proposals) = (m.id.clone(), m.proposals.clone());
        match self.registry.allocate(&id, &proposals, self.now) {
            Ok(lease) => self.start_run(p, lease),
            Err(AllocationError::AllocationConflict { cloud, .. }) => {
                conflict(self, RuntimeEvent::LeaseRace, &cloud);
                self.negotiate(p)
            }
            Err(AllocationError::StaleProposal { cloud, .. }) => {
                conflict(self, RuntimeEvent::StaleProposal, &cloud);
                self.negotiate(p)
            }
            Err(e) => Err(self.invariant(e.to_string())),
        }
    }

    // ---- planning and dispatch ---------------------------------------

    fn start_run(&mut self, p: &ProductId, lease: Lease) -> Result<(), SimError> {
        self.trace.timeline.push(TimelineEntry::LeaseGranted {
            time: self.now,
            product_id: p.clone(),
            clouds: lease.allocation.clouds.clone(),
        });
        let request = self.managers[p].request.clone();
        let product = request.product();
        let deadline = request.request.deadline;
        let mut runs = Vec::new();
        for cl in &lease.allocation.clouds {
            let c = &cl.cloud_id;
            let technique = request
                .technique(&cl.technique_id)
                .cloned()
                .ok_or_else(|| {
                    self.invariant(format!(
                        "lease names unrequested technique {}",
                        cl.technique_id
                    ))
                })?;
            let estimate = estimate_workload(product, &technique);
            let tasks = build_tasks(product, &technique, &estimate, deadline);
            let max_services = self.registry.cloud(c).map_or(0, |x| x.max_services);
            let clones = decide_clone_count(&estimate, deadline, max_services);
            let leased_here = |reg: &Registry| -> Vec<ServiceId> {
                let mut ids: Vec<ServiceId> = reg
                    .cloud(c)
                    .map(|x| {
                        x.services
                            .iter()
                            .filter(|s| s.state == ServiceState::Leased(p.clone()))
                            .map(|s| s.service_id.clone())
                            .collect()
                    })
                    .unwrap_or_default();
                ids.sort();
                ids
            };
            let mut active = leased_here(&self.registry);
            let mut spawned = Vec::new();
            while active.len() < clones.count
                && !self.registry.cloud(c).is_some_and(|x| x.is_full())
            {
                let id = self.spawn_clone(c, p)?;
                spawned.push(id);
                active = leased_here(&self.registry);
            }
            active.truncate(clones.count);
            let services: Vec<(ServiceId, f64)> = active
                .iter()
                .map(|s| {
                    let cap = self
                        .registry
                        .find_service(s)
                        .map_or(1.0, |(_, svc)| svc.capacity);
                    (s.clone(), cap)
                })
                .collect();
            let assignment = partition_load(&tasks, &services, request.request.distribution_mode)
                .map_err(|e| self.invariant(e.to_string()))?;
            let mut run = CloudRun {
                technique: technique.clone(),
                max_services,
                started_at: self.now,
                tasks: BTreeMap::new(),
                queues: BTreeMap::new(),
                in_flight: BTreeMap::new(),
                eptrs: Vec::new(),
                etr: None,
                aborted: false,
                finished: false,
            };
            for (s, list) in &assignment.lists {
                let queue = run.queues.entry(s.clone()).or_default();
                for t in list {
                    queue.push_back(t.task_id.clone());
                    run.tasks.insert(
                        t.task_id.clone(),
                        TaskRun {
                            task: t.clone(),
                            attempts: 0,
                            state: TaskState::Queued,
                        },
                    );
                }
            }
            self.registry.set_pending_load(c, run.pending_load());
            self.trace.plans.push(PlanRecord {
                time: self.now,
                product_id: p.clone(),
                cloud_id: c.clone(),
                technique_id: technique.technique_id.clone(),
                estimate,
                clones,
                spawned,
                assignment,
            });
            runs.push((c.clone(), run));
        }
        let m = self.managers.get_mut(p).expect("manager exists");
        m.phase = Phase::Running;
        m.order = runs.iter().map(|(c, _)| c.clone()).collect();
        m.clouds = runs.into_iter().collect();
        m.lease = Some(lease);
        for c in self.managers[p].order.clone() {
            self.dispatch_cloud(p, &c);
        }
        Ok(())
    }

    fn spawn_clone(&mut self, c: &CloudId, p: &ProductId) -> Result<ServiceId, SimError> {
        let id = self
            .registry
            .spawn_clone(c, p, 1.0)
            .map_err(|e| self.invariant(e.to_string()))?;
        self.workers.insert(id.clone(), Worker::default());
        self.trace.timeline.push(TimelineEntry::ServiceUp {
            time: self.now,
            service_id: id.clone(),
            cloud_id: c.clone(),
            clone: true,
        });
        Ok(id)
    }

    /// Hand the next queued task to every idle, healthy service of a cloud.
    fn dispatch_cloud(&mut self, p: &ProductId, c: &CloudId) {
        let Some(m) = self.managers.get_mut(p) else {
            return;
        };
        let Some(run) = m.clouds.get_mut(c) else {
            return;
        };
        let mut sends = Vec::new();
        for (s, queue) in run.queues.iter_mut() {
            if m.known_failed.contains(s) || run.in_flight.contains_key(s) {
                continue;
            }
            if let Some(t) = queue.pop_front() {
                sends.push((s.clone(), t));
            }
        }
        for (s, t) in sends {
            self.dispatch_task(p, c, &s, &t);
        }
    }

    fn dispatch_task(&mut self, p: &ProductId, c: &CloudId, s: &ServiceId, t: &TaskId) {
        let latency = self.scenario.latency;
        let factor = self.scenario.policy.timeout_factor;
        let now = self.now;
        let run = self
            .managers
            .get_mut(p)
            .and_then(|m| m.clouds.get_mut(c))
            .expect("dispatch to a planned cloud");
        let tr = run.tasks.get_mut(t).expect("task belongs to cloud");
        let attempt = tr.attempts;
        tr.state = TaskState::Dispatched {
            service: s.clone(),
            attempt,
            at: now,
        };
        let budget = 2 * latency + factor * tr.task.est_duration + 1;
        run.in_flight.insert(s.clone(), t.clone());
        self.send(
            Node::Manager(p.clone()),
            Node::Service(s.clone()),
            Message::AssignTask {
                product_id: p.clone(),
                cloud_id: c.clone(),
                service_id: s.clone(),
                task_id: t.clone(),
                attempt,
            },
        );
        self.cancel_timer(p, t);
        self.timers
            .insert((p.clone(), t.clone()), (now + budget, self.next_seq));
        self.schedule(
            now + budget,
            Event::Timeout {
                product: p.clone(),
                task: t.clone(),
                attempt,
            },
        );
    }

    fn cancel_timer(&mut self, p: &ProductId, t: &TaskId) {
        if let Some(key) = self.timers.remove(&(p.clone(), t.clone())) {
            self.queue.remove(&key);
        }
    }

    // ---- service side ------------------------------------------------

    fn on_assign(&mut self, s: &ServiceId, p: &ProductId, c: &CloudId, t: &TaskId, attempt: u32) {
        if self
            .registry
            .find_service(s)
            .is_none_or(|(_, svc)| svc.is_failed())
        {
            return;
        }
        let Some(m) = self.managers.get(p) else {
            return;
        };
        let Some(run) = m.clouds.get(c) else { return };
        let Some(tr) = run.tasks.get(t) else { return };
        let job = Job {
            product: p.clone(),
            cloud: c.clone(),
            task: tr.task.clone(),
            attempt,
            avg_case_time: run.technique.avg_case_time,
            defect_density: m.request.product().defect_density_estimate,
        };
        let worker = self.workers.entry(s.clone()).or_default();
        worker.inbox.push_back(job);
        if worker.current.is_none() {
            self.start_next(s);
        }
    }

    fn start_next(&mut self, s: &ServiceId) {
        loop {
            let worker = self.workers.get_mut(s).expect("worker exists");
            let Some(job) = worker.inbox.pop_front() else {
                return;
            };
            let Some((_, service)) = self.registry.find_service(s) else {
                return;
            };
            let interrupt_at = self
                .fail_times
                .get(s)
                .and_then(|times| times.range(self.now + 1..).next().copied());
            let ctx = ServiceContext {
                service,
                cloud_id: &job.cloud,
                avg_case_time: job.avg_case_time,
                started_at: self.now,
                interrupt_at,
            };
            let runner = SimulatedRunner {
                seed: self.scenario.seed,
                defect_density: job.defect_density,
            };
            let outcome = run_task(&job.task, &runner, &ctx);
            let worker = self.workers.get_mut(s).expect("worker exists");
            let run_id = worker.next_run;
            worker.next_run += 1;
            match outcome {
                Ok(eptr) => {
                    let end = eptr.finished_at;
                    worker.current = Some(Running {
                        job,
                        start: self.now,
                        run_id,
                        eptr: Some(eptr),
                    });
                    self.schedule(
                        end,
                        Event::ExecDone {
                            service: s.clone(),
                            run_id,
                        },
                    );
                    return;
                }
                Err(ExecError::ServiceFailure { .. }) => {
                    // The crash injection cuts this run short when it fires.
                    worker.current = Some(Running {
                        job,
                        start: self.now,
                        run_id,
                        eptr: None,
                    });
                    return;
                }
                // Stale work for a lease that has moved on.
                Err(_) => continue,
            }
        }
    }

    fn on_exec_done(&mut self, s: &ServiceId, run_id: u64) {
        let worker = self.workers.get_mut(s).expect("worker exists");
        if worker.current.as_ref().is_none_or(|r| r.run_id != run_id) {
            return;
        }
        let run = worker.current.take().expect("checked above");
        let eptr = run.eptr.expect("completed runs carry a report");
        self.trace.timeline.push(TimelineEntry::Execution {
            service_id: s.clone(),
            product_id: run.job.product.clone(),
            task_id: run.job.task.task_id.clone(),
            attempt: run.job.attempt,
            start: run.start,
            end: self.now,
            completed: true,
        });
        self.send(
            Node::Service(s.clone()),
            Node::Manager(run.job.product.clone()),
            Message::EptrMsg {
                product_id: run.job.product,
                attempt: run.job.attempt,
                eptr,
            },
        );
        self.start_next(s);
    }

    // ---- manager side: reports and faults ----------------------------

    fn finish_task(&mut self, p: &ProductId, c: &CloudId, t: &TaskId, status: TaskStatus) {
        let run = self
            .managers
            .get_mut(p)
            .and_then(|m| m.clouds.get_mut(c))
            .expect("cloud run");
        let tr = run.tasks.get_mut(t).expect("task");
        tr.state = match status {
            TaskStatus::Completed => TaskState::Completed,
            TaskStatus::Aborted => TaskState::Aborted,
        };
        let case_count = tr.task.case_count;
        let pending = run.pending_load();
        self.registry.set_pending_load(c, pending);
        self.cancel_timer(p, t);
        self.trace.timeline.push(TimelineEntry::TaskFinished {
            time: self.now,
            product_id: p.clone(),
            cloud_id: c.clone(),
            task_id: t.clone(),
            case_count,
            status,
        });
    }

    fn on_eptr(&mut self, p: &ProductId, attempt: u32, eptr: Eptr) -> Result<(), SimError> {
        let c = eptr.cloud_id.clone();
        let t = eptr.task_id.clone();
        let Some(m) = self.managers.get_mut(p) else {
            return Ok(());
        };
        if m.phase != Phase::Running {
            return Ok(());
        }
        let Some(run) = m.clouds.get_mut(&c) else {
            return Ok(());
        };
        let Some(tr) = run.tasks.get(&t) else {
            return Ok(());
        };
        let current = matches!(&tr.state, TaskState::Dispatched { service, attempt: a, .. }
            if *a == attempt && *service == eptr.service_id);
        if !current {
            return Ok(());
        }
        let s = eptr.service_id.clone();
        run.in_flight.remove(&s);
        match validate_output_standard(&eptr, &self.scenario.output_standard) {
            Ok(()) => {
                run.eptrs.push(eptr);
                self.finish_task(p, &c, &t, TaskStatus::Completed);
            }
            Err(missing) => {
                let attempts = tr.attempts;
                let kind = classify(&RuntimeEvent::NonconformingReport { missing });
                let ctx = RecoveryContext {
                    attempts,
                    ..RecoveryContext::default()
                };
                let action = decide_recovery(kind, &ctx, &self.scenario.policy);
                self.fault(
                    kind,
                    s.as_str(),
                    (Some(p), Some(&c), Some(&t)),
                    action,
                    attempts,
                );
                if action == RecoveryAction::Retry {
                    self.cancel_timer(p, &t);
                    let run = self
                        .managers
                        .get_mut(p)
                        .and_then(|m| m.clouds.get_mut(&c))
                        .expect("cloud run");
                    let tr = run.tasks.get_mut(&t).expect("task");
                    tr.attempts += 1;
                    tr.state = TaskState::Queued;
                    run.queues.entry(s).or_default().push_front(t);
                } else {
                    self.finish_task(p, &c, &t, TaskStatus::Aborted);
                }
            }
        }
        self.dispatch_cloud(p, &c);
        self.check_cloud_done(p, &c)
    }

    fn on_timeout(&mut self, p: &ProductId, t: &TaskId, attempt: u32) -> Result<(), SimError> {
        let Some(m) = self.managers.get(p) else {
            return Ok(());
        };
        if m.phase != Phase::Running {
            return Ok(());
        }
        let Some((c, tr)) = m
            .clouds
            .iter()
            .find_map(|(c, run)| run.tasks.get(t).map(|tr| (c.clone(), tr)))
        else {
            return Ok(());
        };
        let TaskState::Dispatched {
            service: s,
            attempt: a,
            at,
        } = tr.state.clone()
        else {
            return Ok(());
        };
        if a != attempt {
            return Ok(());
        }
        let elapsed = (self.now - at).saturating_sub(2 * self.scenario.latency);
        let Some(event) = self
            .scenario
            .policy
            .check_overdue(elapsed, tr.task.est_duration)
        else {
            return Ok(());
        };
        let kind = classify(&event);
        let attempts = tr.attempts;
        let ctx = RecoveryContext {
            attempts,
            ..RecoveryContext::default()
        };
        let action = decide_recovery(kind, &ctx, &self.scenario.policy);
        self.fault(
            kind,
            s.as_str(),
            (Some(p), Some(&c), Some(t)),
            action,
            attempts,
        );
        if action == RecoveryAction::Retry {
            let run = self
                .managers
                .get_mut(p)
                .and_then(|m| m.clouds.get_mut(&c))
                .expect("cloud run");
            run.tasks.get_mut(t).expect("task").attempts += 1;
            self.dispatch_task(p, &c, &s, t);
        } else {
            let run = self
                .managers
                .get_mut(p)
                .and_then(|m| m.clouds.get_mut(&c))
                .expect("cloud run");
            run.in_flight.remove(&s);
            self.finish_task(p, &c, t, TaskStatus::Aborted);
        }
        self.dispatch_cloud(p, &c);
        self.check_cloud_done(p, &c)
    }

    fn on_failure_notice(&mut self, p: &ProductId, s: &ServiceId) -> Result<(), SimError> {
        let cloud = self
            .registry
            .find_service(s)
            .map(|(c, _)| c.cloud_id.clone());
        let running = self
            .managers
            .get(p)
            .is_some_and(|m| m.phase == Phase::Running);
        let Some(c) = cloud
            .clone()
            .filter(|c| running && self.managers[p].clouds.contains_key(c))
        else {
            self.fault(
                ExceptionKind::ServiceFailure,
                s.as_str(),
                (Some(p), cloud.as_ref(), None),
                RecoveryAction::Continue,
                0,
            );
            return Ok(());
        };
        let still_failed = self
            .registry
            .find_service(s)
            .is_some_and(|(_, svc)| svc.is_failed());
        let m = self.managers.get_mut(p).expect("manager exists");
        if still_failed {
            m.known_failed.insert(s.clone());
        }
        let run = m.clouds.get_mut(&c).expect("cloud run");
        let mut victims: Vec<(TaskId, bool)> = Vec::new();
        if let Some(t) = run.in_flight.remove(s) {
            victims.push((t, true));
        }
        if let Some(queue) = run.queues.get_mut(s) {
            victims.extend(queue.drain(..).map(|t| (t, false)));
        }
        if victims.is_empty() {
            self.fault(
                ExceptionKind::ServiceFailure,
                s.as_str(),
                (Some(p), Some(&c), None),
                RecoveryAction::Continue,
                0,
            );
        }
        for (t, was_running) in victims {
            if self.managers[p].clouds[&c].aborted {
                break;
            }
            let candidates = self.live_services(p, &c, s);
            let run = &self.managers[p].clouds[&c];
            let attempts = run.tasks[&t].attempts;
            let ctx = RecoveryContext {
                attempts,
                free_siblings: candidates.len(),
                cloud_size: self.registry.cloud(&c).map_or(0, |x| x.services.len()),
                max_services: run.max_services,
            };
            let kind = ExceptionKind::ServiceFailure;
            let action = decide_recovery(kind, &ctx, &self.scenario.policy);
            self.fault(
                kind,
                s.as_str(),
                (Some(p), Some(&c), Some(&t)),
                action,
                attempts,
            );
            let target = match action {
                RecoveryAction::Reassign => {
                    let run = &self.managers[p].clouds[&c];
                    candidates
                        .into_iter()
                        .min_by_key(|x| (run.load_of(x), x.clone()))
                }
                RecoveryAction::SpawnClone => Some(self.spawn_clone(&c, p)?),
                RecoveryAction::AbortCloud => {
                    self.abort_cloud(p, &c);
                    None
                }
                _ => {
                    self.finish_task(p, &c, &t, TaskStatus::Aborted);
                    None
                }
            };
            if let Some(target) = target {
                self.cancel_timer(p, &t);
                let run = self
                    .managers
                    .get_mut(p)
                    .and_then(|m| m.clouds.get_mut(&c))
                    .expect("cloud run");
                let tr = run.tasks.get_mut(&t).expect("task");
                if was_running {
                    tr.attempts += 1;
                }
                tr.state = TaskState::Queued;
                run.queues.entry(target).or_default().push_back(t);
            }
        }
        self.dispatch_cloud(p, &c);
        self.check_cloud_done(p, &c)
    }

    /// Services of `c` held by `p` that can take work, leaving out `failed`
    /// while it is still down.
    fn live_services(&self, p: &ProductId, c: &CloudId, failed: &ServiceId) -> Vec<ServiceId> {
        let m = &self.managers[p];
        self.registry
            .cloud(c)
            .map(|cloud| {
                cloud
                    .services
                    .iter()
                    .filter(|x| x.state == ServiceState::Leased(p.clone()))
                    .filter(|x| !m.known_failed.contains(&x.service_id))
                    .filter(|x| &x.service_id != failed || !x.is_failed())
                    .map(|x| x.service_id.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    fn abort_cloud(&mut self, p: &ProductId, c: &CloudId) {
        let run = self
            .managers
            .get_mut(p)
            .and_then(|m| m.clouds.get_mut(c))
            .expect("cloud run");
        run.aborted = true;
        run.queues.clear();
        run.in_flight.clear();
        let open: Vec<TaskId> = run
            .tasks
            .iter()
            .filter(|(_, tr)| !tr.state.is_terminal())
            .map(|(t, _)| t.clone())
            .collect();
        for t in open {
            self.finish_task(p, c, &t, TaskStatus::Aborted);
        }
    }

    // ---- aggregation and release -------------------------------------

    fn check_cloud_done(&mut self, p: &ProductId, c: &CloudId) -> Result<(), SimError> {
        let standard = &self.scenario.output_standard;
        let run = self
            .managers
            .get_mut(p)
            .and_then(|m| m.clouds.get_mut(c))
            .expect("cloud run");
        if run.finished || !run.tasks.values().all(|t| t.state.is_terminal()) {
            return Ok(());
        }
        run.finished = true;
        if !run.eptrs.is_empty() {
            let cloud = CloudRef {
                cloud_id: c.clone(),
                technique_id: run.technique.technique_id.clone(),
                started_at: run.started_at,
            };
            let etr =
                merge_eptrs(&cloud, &run.eptrs, standard).map_err(|e| SimError::Invariant {
                    time: self.now,
                    detail: e.to_string(),
                })?;
            run.etr = Some(etr.clone());
            self.send(
                Node::Manager(p.clone()),
                Node::Consumer(p.clone()),
                Message::EtrMsg {
                    product_id: p.clone(),
                    etr,
                },
            );
        }
        if self.managers[p].clouds.values().all(|r| r.finished) {
            self.finish_product(p)?;
        }
        Ok(())
    }

    fn finish_product(&mut self, p: &ProductId) -> Result<(), SimError> {
        let m = &self.managers[p];
        let deadline = m.request.request.deadline;
        let etrs: Vec<Etr> = m
            .order
            .iter()
            .filter_map(|c| m.clouds[c].etr.clone())
            .collect();
        let allocated: Vec<(CloudId, TechniqueId)> = m
            .order
            .iter()
            .map(|c| (c.clone(), m.clouds[c].technique.technique_id.clone()))
            .collect();
        let max_elapsed = etrs.iter().map(|e| e.elapsed).max().unwrap_or(0);
        if max_elapsed > deadline {
            let kind = classify(&RuntimeEvent::DeadlinePassed {
                elapsed: max_elapsed,
                deadline,
            });
            let action = decide_recovery(kind, &RecoveryContext::default(), &self.scenario.policy);
            self.fault(kind, p.as_str(), (Some(p), None, None), action, 0);
        }
        let faults: Vec<FaultRecord> = self
            .trace
            .faults
            .iter()
            .filter(|f| f.product_id.as_ref() == Some(p))
            .cloned()
            .collect();
        let report = integrate_etrs(p, &allocated, &etrs, deadline, &faults)
            .map_err(|e| self.invariant(e.to_string()))?;
        let m = self.managers.get_mut(p).expect("manager exists");
        let mut lease = m.lease.take().ok_or_else(|| SimError::Invariant {
            time: self.now,
            detail: format!("{p} finished without a lease"),
        })?;
        m.phase = Phase::Done;
        self.registry
            .release(&mut lease)
            .map_err(|e| self.invariant(e.to_string()))?;
        self.trace.timeline.push(TimelineEntry::LeaseReleased {
            time: self.now,
            product_id: p.clone(),
            clouds: lease.allocation.clouds.clone(),
        });
        for cl in &lease.allocation.clouds {
            self.send(
                Node::Manager(p.clone()),
                Node::Cloud(cl.cloud_id.clone()),
                Message::ReleaseLease {
                    product_id: p.clone(),
                    cloud_id: cl.cloud_id.clone(),
                },
            );
        }
        for w in self.workers.values_mut() {
            w.inbox.retain(|j| &j.product != p);
        }
        self.outcomes.push(ProductOutcome::Reported {
            completed_at: self.now,
            report,
        });
        self.wake_parked();
        Ok(())
    }
}
