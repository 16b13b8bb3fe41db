//! Workload estimates, clone counts and load distribution across a cloud's
//! services.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    DistributionMode, ModuleId, ProductId, ProductSpec, ServiceId, TaskId, TechniqueId,
    TechniqueSpec, Tick,
};

/// Modules whose estimated duration exceeds the deadline are cut into chunks
/// of at most this many cases.
pub const SPLIT_CHUNK_CASES: u64 = 32;

// f64 products such as 0.7 * 10 land a hair above the integer.
const ROUNDING_SLACK: f64 = 1e-9;

pub(crate) fn ceil_count(x: f64) -> u64 {
    (x - ROUNDING_SLACK).ceil().max(0.0) as u64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadEstimate {
    pub per_module_cases: BTreeMap<ModuleId, u64>,
    pub total_cases: u64,
    /// Ticks needed at unit capacity.
    pub total_time: Tick,
}

/// Linear density model: `ceil(size_kloc * density)` cases per module, never
/// zero for a non-empty module.
pub fn estimate_workload(product: &ProductSpec, technique: &TechniqueSpec) -> WorkloadEstimate {
    let per_module_cases: BTreeMap<_, _> = product
        .modules
        .iter()
        .map(|m| {
            (
                m.module_id.clone(),
                ceil_count(m.size_kloc * technique.test_case_density).max(1),
            )
        })
        .collect();
    let total_cases = per_module_cases.values().sum();
    WorkloadEstimate {
        per_module_cases,
        total_cases,
        total_time: total_cases * technique.avg_case_time,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestTask {
    pub task_id: TaskId,
    pub product_id: ProductId,
    pub module_id: ModuleId,
    pub technique_id: TechniqueId,
    pub case_count: u64,
    pub est_duration: Tick,
    /// Share of the module's size covered by this task.
    pub size_kloc: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("no services to distribute load over")]
    NoServices,
    #[error("task {0} has no test cases")]
    EmptyTask(TaskId),
    #[error("task {task} belongs to {found}, expected {expected}")]
    MixedTasks {
        task: TaskId,
        expected: String,
        found: String,
    },
    #[error("service {0} has non-positive capacity")]
    BadCapacity(ServiceId),
}

impl TestTask {
    pub fn new(
        task_id: impl Into<TaskId>,
        product_id: ProductId,
        module_id: ModuleId,
        technique: &TechniqueSpec,
        case_count: u64,
        size_kloc: f64,
    ) -> Result<Self, ScheduleError> {
        let task_id = task_id.into();
        if case_count == 0 {
            return Err(ScheduleError::EmptyTask(task_id));
        }
        Ok(Self {
            task_id,
            product_id,
            module_id,
            technique_id: technique.technique_id.clone(),
            case_count,
            est_duration: case_count * technique.avg_case_time,
            size_kloc,
        })
    }
}

/// One task per module; a module whose own duration exceeds the deadline is
/// split into `ceil(cases / 32)` chunks.
pub fn build_tasks(
    product: &ProductSpec,
    technique: &TechniqueSpec,
    estimate: &WorkloadEstimate,
    deadline: Tick,
) -> Vec<TestTask> {
    let mut tasks = Vec::new();
    for module in &product.modules {
        let cases = estimate.per_module_cases[&module.module_id];
        let base = format!(
            "{}/{}/{}",
            product.product_id, technique.technique_id, module.module_id
        );
        let duration = cases * technique.avg_case_time;
        if duration <= deadline || cases <= SPLIT_CHUNK_CASES {
            tasks.push(
                TestTask::new(
                    base,
                    product.product_id.clone(),
                    module.module_id.clone(),
                    technique,
                    cases,
                    module.size_kloc,
                )
                .expect("estimate is never zero"),
            );
            continue;
        }
        let chunks = cases.div_ceil(SPLIT_CHUNK_CASES);
        for k in 0..chunks {
            let chunk = SPLIT_CHUNK_CASES.min(cases - k * SPLIT_CHUNK_CASES);
            let share = module.size_kloc * chunk as f64 / cases as f64;
            tasks.push(
                TestTask::new(
                    format!("{base}#{}", k + 1),
                    product.product_id.clone(),
                    module.module_id.clone(),
                    technique,
                    chunk,
                    share,
                )
                .expect("chunk is never empty"),
            );
        }
    }
    tasks
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloneDecision {
    pub count: usize,
    /// False when even `count` unit-capacity services cannot meet the deadline.
    pub feasible: bool,
}

/// `min(K, max(1, ceil(total_time / deadline)))` unit-capacity services.
pub fn decide_clone_count(
    estimate: &WorkloadEstimate,
    deadline: Tick,
    max_services: usize,
) -> CloneDecision {
    let deadline = deadline.max(1);
    let wanted = estimate.total_time.div_ceil(deadline).max(1);
    let count = wanted.min(max_services as u64).max(1) as usize;
    CloneDecision {
        count,
        feasible: count as u64 * deadline >= estimate.total_time,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub mode: DistributionMode,
    pub lists: BTreeMap<ServiceId, Vec<TestTask>>,
}

impl Assignment {
    pub fn load(&self, service: &ServiceId) -> Tick {
        self.lists
            .get(service)
            .map(|l| l.iter().map(|t| t.est_duration).sum())
            .unwrap_or(0)
    }

    /// Largest per-service sum of estimated durations (unit capacity).
    pub fn makespan(&self) -> Tick {
        self.lists.keys().map(|s| self.load(s)).max().unwrap_or(0)
    }

    pub fn total_cases(&self) -> u64 {
        self.lists.values().flatten().map(|t| t.case_count).sum()
    }

    pub fn tasks(&self) -> impl Iterator<Item = (&ServiceId, &TestTask)> {
        self.lists
            .iter()
            .flat_map(|(s, l)| l.iter().map(move |t| (s, t)))
    }
}

struct Slot<'a> {
    id: &'a ServiceId,
    capacity: f64,
    assigned: Tick,
}

impl Slot<'_> {
    fn normalized(&self) -> f64 {
        self.assigned as f64 / self.capacity
    }
}

/// Index of the slot with the smallest normalized load, ties to the smallest id.
fn least_loaded(slots: &[Slot<'_>]) -> usize {
    let mut best = 0;
    for (i, s) in slots.iter().enumerate().skip(1) {
        let b = &slots[best];
        match s.normalized().total_cmp(&b.normalized()) {
            std::cmp::Ordering::Less => best = i,
            std::cmp::Ordering::Equal if s.id < b.id => best = i,
            _ => {}
        }
    }
    best
}

/// Spread one product's tasks for one technique over a cloud's services.
///
/// Round-robin deals tasks cyclically in input order over the services in the
/// given order. Weighted-by-capacity sends each task, in input order, to the
/// service with the smallest assigned/capacity ratio. LPT sorts by duration
/// (longest first, task id breaking ties) and sends each task to the currently
/// least-loaded service. Ties between services go to the smallest id.
pub fn partition_load(
    tasks: &[TestTask],
    services: &[(ServiceId, f64)],
    mode: DistributionMode,
) -> Result<Assignment, ScheduleError> {
    if services.is_empty() {
        return Err(ScheduleError::NoServices);
    }
    if let Some((id, _)) = services.iter().find(|(_, c)| !(*c > 0.0 && c.is_finite())) {
        return Err(ScheduleError::BadCapacity(id.clone()));
    }
    if let Some(first) = tasks.first() {
        for t in tasks {
            if t.case_count == 0 {
                return Err(ScheduleError::EmptyTask(t.task_id.clone()));
            }
            if t.product_id != first.product_id || t.technique_id != first.technique_id {
                return Err(ScheduleError::MixedTasks {
                    task: t.task_id.clone(),
                    expected: format!("{}/{}", first.product_id, first.technique_id),
                    found: format!("{}/{}", t.product_id, t.technique_id),
                });
            }
        }
    }

    let mut slots: Vec<Slot<'_>> = services
        .iter()
        .map(|(id, capacity)| Slot {
            id,
            capacity: *capacity,
            assigned: 0,
        })
        .collect();
    let mut lists: BTreeMap<ServiceId, Vec<TestTask>> = services
        .iter()
        .map(|(id, _)| (id.clone(), Vec::new()))
        .collect();
    let mut place = |slots: &mut Vec<Slot<'_>>, i: usize, task: &TestTask| {
        slots[i].assigned += task.est_duration;
        lists
            .get_mut(slots[i].id)
            .expect("slot has list")
            .push(task.clone());
    };

    match mode {
        DistributionMode::RoundRobin => {
            for (k, task) in tasks.iter().enumerate() {
                place(&mut slots, k % services.len(), task);
            }
        }
        DistributionMode::WeightedByCapacity => {
            for task in tasks {
                let i = least_loaded(&slots);
                place(&mut slots, i, task);
            }
        }
        DistributionMode::Lpt => {
            let mut order: Vec<&TestTask> = tasks.iter().collect();
            order.sort_by(|a, b| {
                b.est_duration
                    .cmp(&a.est_duration)
                    .then_with(|| a.task_id.cmp(&b.task_id))
            });
            for task in order {
                let i = least_loaded(&slots);
                place(&mut slots, i, task);
            }
        }
    }
    Ok(Assignment { mode, lists })
}

/// Plain LPT over bare durations on `machines` identical machines. Returns
/// per-machine loads.
pub fn lpt_loads(durations: &[u64], machines: usize) -> Vec<u64> {
    let mut sorted = durations.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let mut loads = vec![0u64; machines.max(1)];
    for d in sorted {
        let i = (0..loads.len())
            .min_by_key(|&i| (loads[i], i))
            .expect("at least one machine");
        loads[i] += d;
    }
    loads
}
