//! Testing Application Management: checks EPTRs against the output standard,
//! merges them into per-cloud ETRs, and integrates ETRs into the product's
//! final report.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::Eptr;
use crate::fault::{FaultRecord, RecoveryAction};
use crate::model::{CloudId, ProductId, ServiceId, TaskId, TechniqueId, Tick};

pub const CASES_EXECUTED: &str = "cases_executed";
pub const DEFECTS_FOUND: &str = "defects_found";
pub const TIME_SPENT: &str = "time_spent";

/// Fields every report must carry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputStandard {
    pub required_fields: BTreeSet<String>,
    pub allow_extra: bool,
}

impl Default for OutputStandard {
    fn default() -> Self {
        Self {
            required_fields: [CASES_EXECUTED, DEFECTS_FOUND, TIME_SPENT]
                .into_iter()
                .map(String::from)
                .collect(),
            allow_extra: true,
        }
    }
}

impl OutputStandard {
    pub fn new(
        required: impl IntoIterator<Item = impl Into<String>>,
        allow_extra: bool,
    ) -> Option<Self> {
        let required_fields: BTreeSet<String> = required.into_iter().map(Into::into).collect();
        (!required_fields.is_empty()).then_some(Self {
            required_fields,
            allow_extra,
        })
    }
}

fn field_present(report: &Eptr, name: &str) -> bool {
    match name {
        CASES_EXECUTED => report.cases_executed.is_some(),
        DEFECTS_FOUND => report.defects_found.is_some(),
        TIME_SPENT => report.time_spent.is_some(),
        "service_id" | "task_id" | "cloud_id" | "finished_at" => true,
        other => report.extra.contains_key(other),
    }
}

/// Every violation of the standard: missing required fields, plus unexpected
/// extra fields when extras are not allowed.
pub fn validate_output_standard(
    report: &Eptr,
    standard: &OutputStandard,
) -> Result<(), Vec<String>> {
    let mut violations: Vec<String> = standard
        .required_fields
        .iter()
        .filter(|f| !field_present(report, f))
        .cloned()
        .collect();
    if !standard.allow_extra {
        violations.extend(report.extra.keys().map(|k| format!("unexpected:{k}")));
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Environmental Test Report: one cloud's merged results.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Etr {
    pub cloud_id: CloudId,
    pub technique_id: TechniqueId,
    pub total_cases: u64,
    pub total_defects: u64,
    /// Sum of per-task time spent.
    pub cpu_time: Tick,
    /// Latest finish minus the cloud's start.
    pub elapsed: Tick,
    pub eptr_count: u64,
}

/// The cloud an ETR is being built for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudRef {
    pub cloud_id: CloudId,
    pub technique_id: TechniqueId,
    pub started_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregationError {
    #[error("no reports to merge")]
    EmptyReportSet,
    #[error("report from {service}/{task} violates the output standard: {fields:?}")]
    OutputStandardViolation {
        service: ServiceId,
        task: TaskId,
        fields: Vec<String>,
    },
    #[error("report for cloud {found} in a merge for {expected}")]
    MixedCloud { expected: CloudId, found: CloudId },
    #[error("cloud {0} produced no report and was not aborted")]
    MissingCloudReport(CloudId),
    #[error("report for cloud {0} which is not part of the allocation")]
    UnexpectedReport(CloudId),
    #[error("two reports for cloud {0}")]
    DuplicateReport(CloudId),
}

/// Merge one cloud's EPTRs. Any nonconforming report rejects the whole merge.
pub fn merge_eptrs(
    cloud: &CloudRef,
    eptrs: &[Eptr],
    standard: &OutputStandard,
) -> Result<Etr, AggregationError> {
    if eptrs.is_empty() {
        return Err(AggregationError::EmptyReportSet);
    }
    let mut ordered: Vec<&Eptr> = eptrs.iter().collect();
    ordered.sort_by(|a, b| (&a.service_id, &a.task_id).cmp(&(&b.service_id, &b.task_id)));
    for e in &ordered {
        if e.cloud_id != cloud.cloud_id {
            return Err(AggregationError::MixedCloud {
                expected: cloud.cloud_id.clone(),
                found: e.cloud_id.clone(),
            });
        }
        validate_output_standard(e, standard).map_err(|fields| {
            AggregationError::OutputStandardViolation {
                service: e.service_id.clone(),
                task: e.task_id.clone(),
                fields,
            }
        })?;
    }
    let last = eptrs
        .iter()
        .map(|e| e.finished_at)
        .max()
        .unwrap_or(cloud.started_at);
    Ok(Etr {
        cloud_id: cloud.cloud_id.clone(),
        technique_id: cloud.technique_id.clone(),
        total_cases: eptrs.iter().map(Eptr::cases).sum(),
        total_defects: eptrs.iter().map(Eptr::defects).sum(),
        cpu_time: eptrs.iter().map(Eptr::time).sum(),
        elapsed: last.saturating_sub(cloud.started_at),
        eptr_count: eptrs.len() as u64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudStatus {
    Completed,
    /// Some tasks were aborted; the ETR covers the rest.
    Partial,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudReport {
    pub cloud_id: CloudId,
    pub technique_id: TechniqueId,
    pub status: CloudStatus,
    pub etr: Option<Etr>,
}

/// Product-level report returned to the Consumer Service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalReport {
    pub product_id: ProductId,
    pub clouds: Vec<CloudReport>,
    pub grand_total_cases: u64,
    pub grand_total_defects: u64,
    pub grand_cpu_time: Tick,
    pub max_elapsed: Tick,
    pub deadline: Tick,
    pub deadline_met: bool,
    pub exception_log: Vec<FaultRecord>,
}

impl FinalReport {
    pub fn etrs(&self) -> impl Iterator<Item = &Etr> {
        self.clouds.iter().filter_map(|c| c.etr.as_ref())
    }

    pub fn has_aborted_cloud(&self) -> bool {
        self.clouds.iter().any(|c| c.status == CloudStatus::Aborted)
    }

    /// Internal consistency: totals match their parts and counts make sense.
    pub fn check(&self) -> Result<(), String> {
        for etr in self.etrs() {
            check_etr(etr)?;
        }
        let sum = |f: fn(&Etr) -> u64| self.etrs().map(f).sum::<u64>();
        if self.grand_total_cases != sum(|e| e.total_cases) {
            return Err("grand_total_cases differs from the sum over ETRs".into());
        }
        if self.grand_total_defects != sum(|e| e.total_defects) {
            return Err("grand_total_defects differs from the sum over ETRs".into());
        }
        if self.grand_cpu_time != sum(|e| e.cpu_time) {
            return Err("grand_cpu_time differs from the sum over ETRs".into());
        }
        if self.max_elapsed != self.etrs().map(|e| e.elapsed).max().unwrap_or(0) {
            return Err("max_elapsed differs from the ETRs".into());
        }
        if self.deadline_met != (self.max_elapsed <= self.deadline) {
            return Err("deadline_met disagrees with max_elapsed and deadline".into());
        }
        if self.clouds.is_empty() {
            return Err("report covers no clouds".into());
        }
        Ok(())
    }
}

pub fn check_etr(etr: &Etr) -> Result<(), String> {
    if etr.eptr_count == 0 {
        return Err(format!("ETR for {} has eptr_count 0", etr.cloud_id));
    }
    if etr.total_defects > etr.total_cases {
        return Err(format!(
            "ETR for {} has more defects than cases",
            etr.cloud_id
        ));
    }
    Ok(())
}

/// Integrate the ETRs of every allocated cloud into the product report.
///
/// A cloud without an ETR is acceptable only when the fault log shows its
/// work was aborted; it is then reported as `Aborted`.
pub fn integrate_etrs(
    product_id: &ProductId,
    allocated: &[(CloudId, TechniqueId)],
    etrs: &[Etr],
    deadline: Tick,
    faults: &[FaultRecord],
) -> Result<FinalReport, AggregationError> {
    let mut by_cloud: BTreeMap<&CloudId, &Etr> = BTreeMap::new();
    for etr in etrs {
        if !allocated.iter().any(|(c, _)| c == &etr.cloud_id) {
            return Err(AggregationError::UnexpectedReport(etr.cloud_id.clone()));
        }
        if by_cloud.insert(&etr.cloud_id, etr).is_some() {
            return Err(AggregationError::DuplicateReport(etr.cloud_id.clone()));
        }
    }
    let aborts = |cloud: &CloudId, action: RecoveryAction| {
        faults
            .iter()
            .any(|f| f.cloud_id.as_ref() == Some(cloud) && f.action == action)
    };
    let mut clouds = Vec::with_capacity(allocated.len());
    for (cloud_id, technique_id) in allocated {
        let etr = by_cloud.get(cloud_id).map(|e| (*e).clone());
        let cloud_aborted = aborts(cloud_id, RecoveryAction::AbortCloud);
        let task_aborted = aborts(cloud_id, RecoveryAction::AbortTask);
        let status = match (&etr, cloud_aborted, task_aborted) {
            (_, true, _) => CloudStatus::Aborted,
            (None, false, true) => CloudStatus::Aborted,
            (None, false, false) => {
                return Err(AggregationError::MissingCloudReport(cloud_id.clone()))
            }
            (Some(_), false, true) => CloudStatus::Partial,
            (Some(_), false, false) => CloudStatus::Completed,
        };
        clouds.push(CloudReport {
            cloud_id: cloud_id.clone(),
            technique_id: technique_id.clone(),
            status,
            etr,
        });
    }
    let max_elapsed = etrs.iter().map(|e| e.elapsed).max().unwrap_or(0);
    Ok(FinalReport {
        product_id: product_id.clone(),
        clouds,
        grand_total_cases: etrs.iter().map(|e| e.total_cases).sum(),
        grand_total_defects: etrs.iter().map(|e| e.total_defects).sum(),
        grand_cpu_time: etrs.iter().map(|e| e.cpu_time).sum(),
        max_elapsed,
        deadline,
        deadline_met: max_elapsed <= deadline,
        exception_log: faults.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::ExceptionKind;
    use proptest::prelude::*;

    fn eptr(
        service: &str,
        task: &str,
        cases: u64,
        defects: u64,
        time: Tick,
        finished_at: Tick,
    ) -> Eptr {
        Eptr {
            service_id: service.into(),
            task_id: task.into(),
            cloud_id: "C1".into(),
            cases_executed: Some(cases),
            defects_found: Some(defects),
            time_spent: Some(time),
            finished_at,
            extra: BTreeMap::new(),
        }
    }

    fn c1() -> CloudRef {
        CloudRef {
            cloud_id: "C1".into(),
            technique_id: "unit".into(),
            started_at: 5,
        }
    }

    fn etr(cloud: &str, cases: u64, defects: u64, elapsed: Tick) -> Etr {
        Etr {
            cloud_id: cloud.into(),
            technique_id: "unit".into(),
            total_cases: cases,
            total_defects: defects,
            cpu_time: cases,
            elapsed,
            eptr_count: 1,
        }
    }

    fn abort_record(cloud: &str, action: RecoveryAction) -> FaultRecord {
        FaultRecord {
            time: 9,
            kind: ExceptionKind::ServiceFailure,
            subject: "s9".into(),
            product_id: Some("P1".into()),
            cloud_id: Some(cloud.into()),
            task_id: None,
            action,
            attempt: 0,
        }
    }

    #[test]
    fn complete_report_passes() {
        assert_eq!(
            validate_output_standard(&eptr("s1", "t1", 1, 0, 1, 1), &OutputStandard::default()),
            Ok(())
        );
    }

    #[test]
    fn missing_field_is_reported() {
        let mut e = eptr("s1", "t1", 1, 0, 1, 1);
        e.defects_found = None;
        assert_eq!(
            validate_output_standard(&e, &OutputStandard::default()),
            Err(vec!["defects_found".to_string()])
        );
    }

    #[test]
    fn extras_follow_the_flag() {
        let mut e = eptr("s1", "t1", 1, 0, 1, 1);
        e.extra.insert("coverage".into(), serde_json::json!(0.8));
        assert_eq!(
            validate_output_standard(&e, &OutputStandard::default()),
            Ok(())
        );
        let strict = OutputStandard {
            allow_extra: false,
            ..OutputStandard::default()
        };
        assert_eq!(
            validate_output_standard(&e, &strict),
            Err(vec!["unexpected:coverage".to_string()])
        );
        let custom = OutputStandard::new(["coverage"], true).unwrap();
        assert_eq!(validate_output_standard(&e, &custom), Ok(()));
        assert!(OutputStandard::new(Vec::<String>::new(), true).is_none());
    }

    #[test]
    fn merge_sums() {
        let etr = merge_eptrs(
            &c1(),
            &[
                eptr("s1", "t1", 10, 2, 30, 35),
                eptr("s2", "t2", 15, 1, 45, 50),
            ],
            &OutputStandard::default(),
        )
        .unwrap();
        assert_eq!(
            (etr.total_cases, etr.total_defects, etr.cpu_time),
            (25, 3, 75)
        );
        assert_eq!(etr.elapsed, 45);
        assert_eq!(etr.eptr_count, 2);
    }

    #[test]
    fn merge_errors() {
        let std = OutputStandard::default();
        assert_eq!(
            merge_eptrs(&c1(), &[], &std),
            Err(AggregationError::EmptyReportSet)
        );
        let mut bad = eptr("s2", "t2", 15, 1, 45, 50);
        bad.time_spent = None;
        assert_eq!(
            merge_eptrs(&c1(), &[eptr("s1", "t1", 10, 2, 30, 35), bad], &std),
            Err(AggregationError::OutputStandardViolation {
                service: "s2".into(),
                task: "t2".into(),
                fields: vec!["time_spent".into()]
            })
        );
        let mut other = eptr("s2", "t2", 1, 0, 1, 1);
        other.cloud_id = "C2".into();
        assert!(matches!(
            merge_eptrs(&c1(), &[eptr("s1", "t1", 1, 0, 1, 1), other], &std),
            Err(AggregationError::MixedCloud { .. })
        ));
    }

    #[test]
    fn integrate_sums_and_deadline() {
        let allocated = vec![
            (CloudId::from("C1"), TechniqueId::from("unit")),
            ("C2".into(), "unit".into()),
        ];
        let r = integrate_etrs(
            &"P1".into(),
            &allocated,
            &[etr("C1", 25, 3, 40), etr("C2", 40, 5, 60)],
            60,
            &[],
        )
        .unwrap();
        assert_eq!((r.grand_total_cases, r.grand_total_defects), (65, 8));
        assert!(r.deadline_met);
        assert!(r.clouds.iter().all(|c| c.status == CloudStatus::Completed));
        r.check().unwrap();
        let late = integrate_etrs(
            &"P1".into(),
            &allocated,
            &[etr("C1", 25, 3, 40), etr("C2", 40, 5, 61)],
            60,
            &[],
        )
        .unwrap();
        assert!(!late.deadline_met);
    }

    #[test]
    fn aborted_cloud_is_reported_not_missing() {
        let allocated = vec![
            (CloudId::from("C1"), TechniqueId::from("unit")),
            ("C2".into(), "unit".into()),
        ];
        let faults = vec![abort_record("C2", RecoveryAction::AbortCloud)];
        let r = integrate_etrs(
            &"P1".into(),
            &allocated,
            &[etr("C1", 25, 3, 40)],
            60,
            &faults,
        )
        .unwrap();
        assert_eq!(r.clouds[1].status, CloudStatus::Aborted);
        assert_eq!(r.clouds[1].etr, None);
        assert_eq!(r.exception_log, faults);
        assert!(r.has_aborted_cloud());

        let only_tasks = vec![abort_record("C2", RecoveryAction::AbortTask)];
        let r = integrate_etrs(
            &"P1".into(),
            &allocated,
            &[etr("C1", 25, 3, 40)],
            60,
            &only_tasks,
        )
        .unwrap();
        assert_eq!(r.clouds[1].status, CloudStatus::Aborted);
        let partial = vec![abort_record("C1", RecoveryAction::AbortTask)];
        let r = integrate_etrs(
            &"P1".into(),
            &allocated[..1],
            &[etr("C1", 25, 3, 40)],
            60,
            &partial,
        )
        .unwrap();
        assert_eq!(r.clouds[0].status, CloudStatus::Partial);
    }

    #[test]
    fn silent_absence_is_an_error() {
        let allocated = vec![
            (CloudId::from("C1"), TechniqueId::from("unit")),
            ("C2".into(), "unit".into()),
        ];
        assert_eq!(
            integrate_etrs(&"P1".into(), &allocated, &[etr("C1", 25, 3, 40)], 60, &[]),
            Err(AggregationError::MissingCloudReport("C2".into()))
        );
        assert_eq!(
            integrate_etrs(
                &"P1".into(),
                &allocated[..1],
                &[etr("C1", 1, 0, 1), etr("C2", 1, 0, 1)],
                60,
                &[]
            ),
            Err(AggregationError::UnexpectedReport("C2".into()))
        );
    }

    #[test]
    fn check_catches_tampering() {
        let allocated = vec![(CloudId::from("C1"), TechniqueId::from("unit"))];
        let mut r =
            integrate_etrs(&"P1".into(), &allocated, &[etr("C1", 25, 3, 40)], 60, &[]).unwrap();
        r.grand_total_cases += 1;
        assert!(r.check().is_err());
    }

    proptest! {
        #[test]
        fn merge_is_order_independent(
            rows in prop::collection::vec((0u64..50, 0u64..50, 0u64..100, 0u64..500), 1..12),
            shift in 0usize..12,
        ) {
            let eptrs: Vec<Eptr> = rows
                .iter()
                .enumerate()
                .map(|(i, &(c, d, t, f))| eptr(&format!("s{}", i % 3), &format!("t{i}"), c + d, d, t, f))
                .collect();
            let std = OutputStandard::default();
            let a = merge_eptrs(&c1(), &eptrs, &std).unwrap();
            let mut rotated = eptrs.clone();
            rotated.rotate_left(shift % eptrs.len());
            rotated.reverse();
            prop_assert_eq!(&merge_eptrs(&c1(), &rotated, &std).unwrap(), &a);
            prop_assert_eq!(a.total_cases, eptrs.iter().map(Eptr::cases).sum::<u64>());
            let json = serde_json::to_string(&a).unwrap();
            prop_assert_eq!(serde_json::from_str::<Etr>(&json).unwrap(), a);
        }
    }
}
