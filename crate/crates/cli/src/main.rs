//! `nimbus`: run scenarios, validate files and render reports.
//!
//! Exit codes:
//!
//! | code | meaning                                              |
//! |------|------------------------------------------------------|
//! | 0    | success                                              |
//! | 1    | I/O or internal error                                |
//! | 2    | invalid input (bad scenario, failed validation, usage) |
//! | 3    | simulation finished but some cloud was aborted       |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use nimbus_core::format::{validate_document, DocKind, Document};
use nimbus_core::simnet::{run_simulation, ProductOutcome, SimError, SimResult};
use serde_json::json;

const EXIT_IO: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_ABORTED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "nimbus",
    version,
    about = "Testing-cloud orchestration on a simulated network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write trace, reports and metrics to a directory.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a scenario, product, request, catalog, report, trace or metrics file.
    Validate { file: PathBuf },
    /// Summarize a trace written by `simulate`.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Structured,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {err}", path.display()),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn load(path: &Path, expected: DocKind) -> Result<Document, Failure> {
    let doc = validate_document(&read(path)?).map_err(|diags| {
        let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        Failure::invalid(format!("{}: {}", path.display(), lines.join("; ")))
    })?;
    if doc.kind() != expected {
        return Err(Failure::invalid(format!(
            "{}: expected a {expected:?} document, found {:?}",
            path.display(),
            doc.kind()
        )));
    }
    Ok(doc)
}

/// Write through a temporary file in the same directory, then rename.
fn write_atomic(path: &Path, contents: &str) -> Result<(), Failure> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Failure::io(dir, e))?;
    tmp.write_all(contents.as_bytes())
        .map_err(|e| Failure::io(path, e))?;
    tmp.persist(path).map_err(|e| Failure::io(path, e.error))?;
    Ok(())
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn simulate(scenario_path: &Path, out: &Path, seed: Option<u64>) -> Result<u8, Failure> {
    let Document::Scenario(mut scenario) = load(scenario_path, DocKind::Scenario)? else {
        unreachable!("load checked the kind");
    };
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    info!(
        "simulating {} requests on {} clouds, seed {}",
        scenario.requests.len(),
        scenario.topology.clouds.len(),
        scenario.seed
    );
    let result = run_simulation(&scenario).map_err(|e| match e {
        SimError::ScenarioInvalid(msg) => Failure::invalid(format!("scenario invalid: {msg}")),
        other => Failure {
            code: EXIT_IO,
            message: other.to_string(),
        },
    })?;
    fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
    write_atomic(
        &out.join("trace.json"),
        &Document::Trace(Box::new(result.clone())).to_json(),
    )?;
    write_atomic(
        &out.join("metrics.json"),
        &Document::Metrics(result.metrics.clone()).to_json(),
    )?;
    for report in result.reports() {
        let name = format!("report-{}.json", file_safe(report.product_id.as_str()));
        write_atomic(
            &out.join(name),
            &Document::FinalReport(report.clone()).to_json(),
        )?;
    }
    print!("{}", render_text(&result));
    let aborted = result.reports().any(|r| r.has_aborted_cloud());
    Ok(if aborted { EXIT_ABORTED } else { 0 })
}

fn validate(path: &Path) -> Result<u8, Failure> {
    match validate_document(&read(path)?) {
        Ok(doc) => {
            println!("{}: ok ({:?})", path.display(), doc.kind());
            Ok(0)
        }
        Err(diags) => {
            for d in &diags {
                println!("{}: {d}", path.display());
            }
            Ok(EXIT_INVALID)
        }
    }
}

fn render_text(result: &SimResult) -> String {
    let mut s = String::new();
    for outcome in &result.outcomes {
        match outcome {
            ProductOutcome::Reported {
                completed_at,
                report,
            } => {
                s += &format!(
                    "{} reported at {completed_at}: cases={} defects={} cpu={} elapsed={} deadline={} met={}\n",
                    report.product_id,
                    report.grand_total_cases,
                    report.grand_total_defects,
                    report.grand_cpu_time,
                    report.max_elapsed,
                    report.deadline,
                    report.deadline_met
                );
                for c in &report.clouds {
                    s += &format!("  {} [{}] {:?}", c.cloud_id, c.technique_id, c.status);
                    if let Some(etr) = &c.etr {
                        s += &format!(
                            " cases={} defects={} elapsed={} eptrs={}",
                            etr.total_cases, etr.total_defects, etr.elapsed, etr.eptr_count
                        );
                    }
                    s.push('\n');
                }
            }
            ProductOutcome::Failed { product_id, fault } => {
                s += &format!(
                    "{product_id} failed: {:?} ({})\n",
                    fault.kind, fault.subject
                );
            }
        }
    }
    s += &format!(
        "makespan={} faults={} messages={}\n",
        result.metrics.makespan,
        result.trace.faults.len(),
        result.trace.messages.len()
    );
    s
}

fn render_structured(result: &SimResult) -> String {
    let products: Vec<_> = result
        .outcomes
        .iter()
        .map(|o| match o {
            ProductOutcome::Reported {
                completed_at,
                report,
            } => json!({
                "product_id": report.product_id,
                "outcome": "reported",
                "completed_at": completed_at,
                "grand_total_cases": report.grand_total_cases,
                "grand_total_defects": report.grand_total_defects,
                "grand_cpu_time": report.grand_cpu_time,
                "max_elapsed": report.max_elapsed,
                "deadline_met": report.deadline_met,
                "clouds": report.clouds,
            }),
            ProductOutcome::Failed { product_id, fault } => json!({
                "product_id": product_id,
                "outcome": "failed",
                "fault": fault,
            }),
        })
        .collect();
    let summary = json!({
        "version": result.version,
        "seed": result.trace.seed,
        "products": products,
        "fault_count": result.trace.faults.len(),
        "metrics": result.metrics,
    });
    serde_json::to_string_pretty(&summary).expect("value serializes") + "\n"
}

fn report(trace: &Path, format: Format) -> Result<u8, Failure> {
    let Document::Trace(result) = load(trace, DocKind::Trace)? else {
        unreachable!("load checked the kind");
    };
    match format {
        Format::Text => print!("{}", render_text(&result)),
        Format::Structured => print!("{}", render_structured(&result)),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let filter = std::env::var("NIMBUS_LOG").unwrap_or_else(|_| "error".into());
    env_logger::Builder::new().parse_filters(&filter).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate {
            scenario,
            out,
            seed,
        } => simulate(scenario, out, *seed),
        Command::Validate { file } => validate(file),
        Command::Report { trace, format } => report(trace, *format),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("nimbus: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
