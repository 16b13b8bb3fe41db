//! Testing Service worker logic: run assigned tasks through a pluggable
//! runner and emit Environmental Partial Test Reports (EPTRs).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CloudId, ServiceId, ServiceState, TaskId, TestingService, Tick};
use crate::scheduler::{Assignment, TestTask};

/// One service's result for one task.
///
/// The three measured fields are optional on the wire so that a report
/// missing one of them can be represented and rejected by the aggregator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eptr {
    pub service_id: ServiceId,
    pub task_id: TaskId,
    pub cloud_id: CloudId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cases_executed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defects_found: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_spent: Option<Tick>,
    pub finished_at: Tick,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Eptr {
    pub fn cases(&self) -> u64 {
        self.cases_executed.unwrap_or(0)
    }

    pub fn defects(&self) -> u64 {
        self.defects_found.unwrap_or(0)
    }

    pub fn time(&self) -> Tick {
        self.time_spent.unwrap_or(0)
    }
}

/// SplitMix64, as published by Steele, Lea and Flood.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// 64-bit FNV-1a over the UTF-8 bytes of an id.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Per-case defect probability in basis points, `round(p * 10000)` with
/// `p = min(1, density * size_kloc / case_count)`.
pub fn defect_threshold(defect_density: f64, size_kloc: f64, case_count: u64) -> u64 {
    if case_count == 0 {
        return 0;
    }
    let p = (defect_density * size_kloc / case_count as f64).clamp(0.0, 1.0);
    (p * 10_000.0).round() as u64
}

/// Number of cases out of `case_count` that find a defect.
pub fn simulated_defects(task_id: &TaskId, case_count: u64, seed: u64, threshold: u64) -> u64 {
    let mut rng = SplitMix64::new(seed ^ fnv1a64(task_id.as_str().as_bytes()));
    (0..case_count)
        .filter(|_| rng.next_u64() % 10_000 < threshold)
        .count() as u64
}

/// What a service knows while executing one task.
#[derive(Clone, Debug)]
pub struct ServiceContext<'a> {
    pub service: &'a TestingService,
    pub cloud_id: &'a CloudId,
    pub avg_case_time: Tick,
    pub started_at: Tick,
    /// Tick at which the service will crash, if one is scheduled.
    pub interrupt_at: Option<Tick>,
}

impl ServiceContext<'_> {
    /// `ceil(case_count * avg_case_time / capacity)`.
    pub fn nominal_time(&self, task: &TestTask) -> Tick {
        crate::scheduler::ceil_count(
            (task.case_count * self.avg_case_time) as f64 / self.service.capacity,
        )
    }
}

/// Measured values returned by a runner. `None` marks a field the runner did
/// not report.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunReport {
    pub cases_executed: Option<u64>,
    pub defects_found: Option<u64>,
    pub time_spent: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("service {service} failed while running {task}")]
    ServiceFailure { service: ServiceId, task: TaskId },
    #[error("service {service} is not leased to the owner of {task}")]
    NotLeased { service: ServiceId, task: TaskId },
    #[error("task {0} has no test cases")]
    EmptyTask(TaskId),
    #[error("runner failed (status {status:?}): {message}")]
    RunnerError {
        status: Option<i32>,
        message: String,
    },
}

/// Execution back end.
pub trait Runner {
    fn run(&self, task: &TestTask, ctx: &ServiceContext<'_>) -> Result<RunReport, ExecError>;
}

/// Deterministic stand-in for real testing: each case draws a defect from a
/// SplitMix64 stream seeded with `seed ^ fnv1a64(task_id)`.
#[derive(Clone, Copy, Debug)]
pub struct SimulatedRunner {
    pub seed: u64,
    pub defect_density: f64,
}

impl Runner for SimulatedRunner {
    fn run(&self, task: &TestTask, ctx: &ServiceContext<'_>) -> Result<RunReport, ExecError> {
        let threshold = defect_threshold(self.defect_density, task.size_kloc, task.case_count);
        Ok(RunReport {
            cases_executed: Some(task.case_count),
            defects_found: Some(simulated_defects(
                &task.task_id,
                task.case_count,
                self.seed,
                threshold,
            )),
            time_spent: Some(ctx.nominal_time(task)),
        })
    }
}

/// Run one task on one service. A crash scheduled inside the execution
/// window discards all partial work.
pub fn run_task(
    task: &TestTask,
    runner: &dyn Runner,
    ctx: &ServiceContext<'_>,
) -> Result<Eptr, ExecError> {
    let service = ctx.service;
    match &service.state {
        ServiceState::Leased(p) if p == &task.product_id => {}
        ServiceState::Failed => {
            return Err(ExecError::ServiceFailure {
                service: service.service_id.clone(),
                task: task.task_id.clone(),
            })
        }
        _ => {
            return Err(ExecError::NotLeased {
                service: service.service_id.clone(),
                task: task.task_id.clone(),
            })
        }
    }
    if task.case_count == 0 {
        return Err(ExecError::EmptyTask(task.task_id.clone()));
    }
    let nominal = ctx.nominal_time(task);
    if let Some(at) = ctx.interrupt_at {
        if at > ctx.started_at && at <= ctx.started_at + nominal {
            return Err(ExecError::ServiceFailure {
                service: service.service_id.clone(),
                task: task.task_id.clone(),
            });
        }
    }
    let report = runner.run(task, ctx)?;
    let spent = report.time_spent.unwrap_or(nominal);
    Ok(Eptr {
        service_id: service.service_id.clone(),
        task_id: task.task_id.clone(),
        cloud_id: ctx.cloud_id.clone(),
        cases_executed: report.cases_executed,
        defects_found: report.defects_found,
        time_spent: report.time_spent,
        finished_at: ctx.started_at + spent,
        extra: BTreeMap::new(),
    })
}

/// Invokes a user program per task. The task is written as JSON on stdin and
/// the program must print `EPTR <cases> <defects> <millis>`.
#[derive(Clone, Debug)]
pub struct ExternalRunner {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ExternalRunner {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
        }
    }

    pub fn arg(mut self, arg: impl Into<String>) -> Self {
        self.args.push(arg.into());
        self
    }
}

/// Parse the last `EPTR ...` line of a runner's output.
pub fn parse_result_line(output: &str) -> Result<RunReport, ExecError> {
    let line = output
        .lines()
        .rev()
        .find(|l| l.trim_start().starts_with("EPTR"))
        .ok_or_else(|| ExecError::RunnerError {
            status: Some(0),
            message: "no EPTR line in runner output".into(),
        })?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    let parse = |i: usize, name: &str| {
        fields
            .get(i)
            .and_then(|f| f.parse::<u64>().ok())
            .ok_or_else(|| ExecError::RunnerError {
                status: Some(0),
                message: format!("bad {name} in result line {line:?}"),
            })
    };
    if fields.len() != 4 || fields[0] != "EPTR" {
        return Err(ExecError::RunnerError {
            status: Some(0),
            message: format!("malformed result line {line:?}"),
        });
    }
    Ok(RunReport {
        cases_executed: Some(parse(1, "cases")?),
        defects_found: Some(parse(2, "defects")?),
        time_spent: Some(parse(3, "millis")?),
    })
}

impl Runner for ExternalRunner {
    fn run(&self, task: &TestTask, _ctx: &ServiceContext<'_>) -> Result<RunReport, ExecError> {
        let spawn_err = |e: std::io::Error| ExecError::RunnerError {
            status: None,
            message: format!("{}: {e}", self.program.display()),
        };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(spawn_err)?;
        let payload = serde_json::to_vec(task).expect("task serializes");
        if let Some(mut stdin) = child.stdin.take() {
            // A runner that ignores stdin may close it early; that is not an error.
            let _ = stdin.write_all(&payload);
        }
        let out = child.wait_with_output().map_err(spawn_err)?;
        if !out.status.success() {
            return Err(ExecError::RunnerError {
                status: out.status.code(),
                message: String::from_utf8_lossy(&out.stderr).trim().to_owned(),
            });
        }
        parse_result_line(&String::from_utf8_lossy(&out.stdout))
    }
}

/// Real-runner mode: every service works through its list on its own thread.
/// Results come back ordered by `(finished_at, service_id)`; times are
/// milliseconds since the call started.
pub fn execute_assignment<R: Runner + Sync>(
    assignment: &Assignment,
    services: &[TestingService],
    cloud_id: &CloudId,
    avg_case_time: Tick,
    runner: &R,
) -> Vec<Result<Eptr, ExecError>> {
    let origin = Instant::now();
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for (service_id, tasks) in &assignment.lists {
            let Some(service) = services.iter().find(|s| &s.service_id == service_id) else {
                for t in tasks {
                    let _ = tx.send((
                        0,
                        service_id.clone(),
                        Err(ExecError::NotLeased {
                            service: service_id.clone(),
                            task: t.task_id.clone(),
                        }),
                    ));
                }
                continue;
            };
            let tx = tx.clone();
            scope.spawn(move || {
                for task in tasks {
                    let started_at = origin.elapsed().as_millis() as Tick;
                    let ctx = ServiceContext {
                        service,
                        cloud_id,
                        avg_case_time,
                        started_at,
                        interrupt_at: None,
                    };
                    let result = run_task(task, runner, &ctx);
                    let key = result.as_ref().map(|e| e.finished_at).unwrap_or(started_at);
                    if tx.send((key, service.service_id.clone(), result)).is_err() {
                        return;
                    }
                }
            });
        }
    });
    drop(tx);
    let mut ordered: Vec<_> = rx.into_iter().enumerate().collect();
    ordered.sort_by(|(ia, (ta, sa, _)), (ib, (tb, sb, _))| (ta, sa, ia).cmp(&(tb, sb, ib)));
    ordered.into_iter().map(|(_, (_, _, r))| r).collect()
}
