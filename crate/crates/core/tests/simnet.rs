use std::collections::{BTreeMap, BTreeSet};

use nimbus_core::aggregation::CloudStatus;
use nimbus_core::fault::{ExceptionKind, RecoveryAction};
use nimbus_core::model::{
    ConsumerRequest, DistributionMode, ModuleSpec, ProductSpec, ServiceId, TechniqueSpec,
};
use nimbus_core::simnet::generate::{random_scenario, GenConfig};
use nimbus_core::simnet::{
    run_simulation, CloudSpec, FailureInjection, InjectionKind, Message, Scenario, ServiceSpec,
    SimError, TimedRequest, TimelineEntry, Topology,
};

fn technique(id: &str, density: f64, avg: u64) -> TechniqueSpec {
    TechniqueSpec {
        technique_id: id.into(),
        test_case_density: density,
        avg_case_time: avg,
        avg_case_size: 1.0,
    }
}

fn request(
    id: &str,
    sizes: &[f64],
    deadline: u64,
    techniques: &[&str],
    density: f64,
) -> ConsumerRequest {
    ConsumerRequest {
        product: ProductSpec {
            product_id: id.into(),
            modules: sizes
                .iter()
                .enumerate()
                .map(|(i, s)| ModuleSpec {
                    module_id: format!("m{}", i + 1).into(),
                    size_kloc: *s,
                })
                .collect(),
            defect_density_estimate: density,
        },
        deadline,
        techniques: techniques.iter().map(|t| (*t).into()).collect(),
        distribution_mode: DistributionMode::Lpt,
    }
}

fn cloud(id: &str, technique: &str, max: usize, services: &[&str]) -> CloudSpec {
    CloudSpec {
        cloud_id: id.into(),
        technique_id: technique.into(),
        max_services: max,
        services: services
            .iter()
            .map(|s| ServiceSpec {
                service_id: (*s).into(),
                capacity: 1.0,
            })
            .collect(),
    }
}

/// One product, four equal modules, a two-service cloud that must grow to
/// four to meet the deadline.
fn two_service_scenario() -> Scenario {
    Scenario {
        seed: 7,
        catalog: vec![technique("unit", 10.0, 3)],
        topology: Topology {
            clouds: vec![cloud("C1", "unit", 4, &["s1", "s2"])],
        },
        requests: vec![TimedRequest {
            arrival: 0,
            request: request("P1", &[1.0; 4], 36, &["unit"], 0.5),
        }],
        failure_injections: vec![],
        latency: 1,
        policy: Default::default(),
        output_standard: Default::default(),
    }
}

#[test]
fn hand_traced_run_matches_expected_timings() {
    let result = run_simulation(&two_service_scenario()).unwrap();
    let plan = &result.trace.plans[0];
    assert_eq!(plan.time, 3);
    assert_eq!(plan.clones.count, 4);
    assert_eq!(
        plan.spawned,
        vec![ServiceId::from("C1-clone1"), ServiceId::from("C1-clone2")]
    );
    let placed: BTreeMap<String, String> = plan
        .assignment
        .tasks()
        .map(|(s, t)| (t.module_id.to_string(), s.to_string()))
        .collect();
    assert_eq!(placed["m1"], "C1-clone1");
    assert_eq!(placed["m2"], "C1-clone2");
    assert_eq!(placed["m3"], "s1");
    assert_eq!(placed["m4"], "s2");

    let eptr_arrivals: Vec<u64> = result
        .trace
        .messages
        .iter()
        .filter(|m| matches!(m.message, Message::EptrMsg { .. }))
        .map(|m| m.deliver_at)
        .collect();
    assert_eq!(eptr_arrivals, vec![35; 4]);
    for e in result.delivered_eptrs() {
        assert_eq!(e.finished_at, 34);
        assert_eq!(e.cases(), 10);
    }
    let report = result.reports().next().unwrap();
    let etr = report.etrs().next().unwrap();
    assert_eq!(etr.elapsed, 31);
    assert_eq!(etr.total_cases, 40);
    assert!(report.deadline_met);
    assert_eq!(report.clouds[0].status, CloudStatus::Completed);
    assert_eq!(result.metrics.makespan, 34);
    assert_eq!(result.trace.end_time, 36);
    assert!(result.trace.faults.is_empty());
}

#[test]
fn crash_mid_task_reassigns_to_least_loaded_sibling() {
    let mut scenario = two_service_scenario();
    scenario.failure_injections.push(FailureInjection {
        time: 5,
        service_id: "s1".into(),
        action: InjectionKind::Fail,
    });
    let result = run_simulation(&scenario).unwrap();
    let failures: Vec<_> = result
        .trace
        .faults
        .iter()
        .filter(|f| f.kind == ExceptionKind::ServiceFailure)
        .collect();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].time, 6);
    assert_eq!(failures[0].action, RecoveryAction::Reassign);
    assert_eq!(failures[0].task_id.as_ref().unwrap().as_str(), "P1/unit/m3");

    let m3_runs: Vec<_> = result
        .trace
        .timeline
        .iter()
        .filter_map(|e| match e {
            TimelineEntry::Execution {
                service_id,
                task_id,
                start,
                end,
                completed,
                ..
            } if task_id.as_str() == "P1/unit/m3" => {
                Some((service_id.to_string(), *start, *end, *completed))
            }
            _ => None,
        })
        .collect();
    assert_eq!(
        m3_runs,
        vec![
            ("s1".to_string(), 4, 5, false),
            ("C1-clone1".to_string(), 36, 66, true)
        ]
    );
    let report = result.reports().next().unwrap();
    assert_eq!(report.grand_total_cases, 40);
    assert!(!report.deadline_met);
    assert!(
        report
            .exception_log
            .iter()
            .any(|f| f.kind == ExceptionKind::DeadlineExceeded
                && f.action == RecoveryAction::Continue)
    );
}

#[test]
fn lone_service_crash_spawns_a_clone() {
    let mut scenario = two_service_scenario();
    scenario.topology.clouds = vec![cloud("C1", "unit", 2, &["s1"])];
    scenario.requests[0].request = request("P1", &[1.0], 100, &["unit"], 0.5);
    scenario.failure_injections.push(FailureInjection {
        time: 10,
        service_id: "s1".into(),
        action: InjectionKind::Fail,
    });
    let result = run_simulation(&scenario).unwrap();
    let f = &result.trace.faults[0];
    assert_eq!(
        (f.kind, f.action),
        (ExceptionKind::ServiceFailure, RecoveryAction::SpawnClone)
    );
    let report = result.reports().next().unwrap();
    assert_eq!(report.clouds[0].status, CloudStatus::Completed);
    assert_eq!(report.grand_total_cases, 10);
}

#[test]
fn full_cloud_crash_aborts_the_cloud() {
    let mut scenario = two_service_scenario();
    scenario.topology.clouds = vec![cloud("C1", "unit", 1, &["s1"])];
    scenario.requests[0].request = request("P1", &[1.0], 100, &["unit"], 0.5);
    scenario.failure_injections.push(FailureInjection {
        time: 10,
        service_id: "s1".into(),
        action: InjectionKind::Fail,
    });
    let result = run_simulation(&scenario).unwrap();
    let report = result.reports().next().unwrap();
    assert_eq!(report.clouds[0].status, CloudStatus::Aborted);
    assert!(report.has_aborted_cloud());
    assert_eq!(report.grand_total_cases, 0);
}

#[test]
fn contending_products_wait_for_the_lease() {
    let mut scenario = two_service_scenario();
    scenario.requests.push(TimedRequest {
        arrival: 0,
        request: request("P2", &[1.0], 100, &["unit"], 0.5),
    });
    let result = run_simulation(&scenario).unwrap();
    assert_eq!(result.reports().count(), 2);
    let grants: Vec<(String, u64)> = result
        .trace
        .timeline
        .iter()
        .filter_map(|e| match e {
            TimelineEntry::LeaseGranted {
                time, product_id, ..
            } => Some((product_id.to_string(), *time)),
            _ => None,
        })
        .collect();
    assert_eq!(grants[0], ("P1".to_string(), 3));
    // P2 gets the cloud only once P1 has released it at 35.
    assert_eq!(grants[1].0, "P2");
    assert!(grants[1].1 >= 35);
    assert!(result
        .trace
        .faults
        .iter()
        .all(|f| f.kind == ExceptionKind::AllocationConflict && f.action == RecoveryAction::Retry));
}

#[test]
fn missing_technique_fails_the_request() {
    let mut scenario = two_service_scenario();
    scenario.catalog.push(technique("mutation", 2.0, 1));
    scenario.requests[0]
        .request
        .techniques
        .push("mutation".into());
    let result = run_simulation(&scenario).unwrap();
    assert_eq!(result.reports().count(), 0);
    assert_eq!(
        result.trace.faults[0].kind,
        ExceptionKind::TechniqueUnavailable
    );
    assert_eq!(result.trace.faults[0].action, RecoveryAction::AbortTask);
}

#[test]
fn unknown_service_in_injection_is_rejected() {
    let mut scenario = two_service_scenario();
    scenario.failure_injections.push(FailureInjection {
        time: 1,
        service_id: "ghost".into(),
        action: InjectionKind::Fail,
    });
    match run_simulation(&scenario) {
        Err(SimError::ScenarioInvalid(msg)) => assert!(msg.contains("ghost"), "{msg}"),
        other => panic!("expected ScenarioInvalid, got {other:?}"),
    }
}

#[test]
fn messages_are_causal_and_ordered() {
    for seed in 0..50 {
        let result =
            run_simulation(&random_scenario(seed, &GenConfig::with_failures(0, 4))).unwrap();
        let l = result.trace.latency;
        let mut last_send = 0;
        for m in &result.trace.messages {
            assert_eq!(m.deliver_at, m.sent_at + l);
            assert!(
                m.sent_at >= last_send,
                "seed {seed}: send times go backwards"
            );
            last_send = m.sent_at;
        }
        assert!(result.trace.invariant_checks > 0);
    }
}

#[test]
fn random_runs_are_reproducible() {
    for seed in 0..30 {
        let s = random_scenario(seed, &GenConfig::with_failures(0, 5));
        let a = run_simulation(&s).unwrap().to_json();
        let b = run_simulation(&s).unwrap().to_json();
        assert_eq!(a, b, "seed {seed}");
    }
}

#[test]
fn every_task_ends_terminal_under_failures() {
    for seed in 0..100 {
        let s = random_scenario(seed, &GenConfig::with_failures(1, 5));
        let result = run_simulation(&s).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let planned: BTreeSet<String> = result
            .trace
            .plans
            .iter()
            .flat_map(|p| p.assignment.tasks().map(|(_, t)| t.task_id.to_string()))
            .collect();
        let finished: BTreeSet<String> = result
            .trace
            .timeline
            .iter()
            .filter_map(|e| match e {
                TimelineEntry::TaskFinished { task_id, .. } => Some(task_id.to_string()),
                _ => None,
            })
            .collect();
        assert_eq!(planned, finished, "seed {seed}");
        for r in result.reports() {
            r.check().unwrap();
        }
    }
}
