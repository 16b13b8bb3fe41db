//! Versioned JSON documents exchanged with the outside world.
//!
//! Every file is an envelope `{"version": "v1", "kind": ..., "body": ...}`.
//! [`validate_document`] reports every problem it can find as a
//! [`Diagnostic`] instead of stopping at the first decode error.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aggregation::{check_etr, Etr, FinalReport};
use crate::model::{
    validate_product, validate_technique, ConsumerRequest, ProductSpec, TechniqueSpec,
};
use crate::simnet::{Metrics, Scenario, SimResult};

pub const FORMAT_VERSION: &str = "v1";

/// Fields that hold counts or durations and therefore can never be negative.
const COUNT_FIELDS: &[&str] = &[
    "arrival",
    "attempt",
    "avg_case_time",
    "busy_ticks",
    "case_count",
    "cases_executed",
    "cpu_time",
    "deadline",
    "defects_found",
    "elapsed",
    "end_time",
    "eptr_count",
    "est_duration",
    "finished_at",
    "grand_cpu_time",
    "grand_total_cases",
    "grand_total_defects",
    "latency",
    "makespan",
    "max_elapsed",
    "max_retries",
    "max_services",
    "time",
    "time_spent",
    "timeout_factor",
    "total_cases",
    "total_defects",
    "total_ticks",
    "up_ticks",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    Scenario,
    Product,
    Request,
    Catalog,
    FinalReport,
    Etr,
    Trace,
    Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Document {
    Scenario(Scenario),
    Product(ProductSpec),
    Request(ConsumerRequest),
    Catalog(Vec<TechniqueSpec>),
    FinalReport(FinalReport),
    Etr(Etr),
    Trace(Box<SimResult>),
    Metrics(Metrics),
}

impl Document {
    pub fn kind(&self) -> DocKind {
        match self {
            Document::Scenario(_) => DocKind::Scenario,
            Document::Product(_) => DocKind::Product,
            Document::Request(_) => DocKind::Request,
            Document::Catalog(_) => DocKind::Catalog,
            Document::FinalReport(_) => DocKind::FinalReport,
            Document::Etr(_) => DocKind::Etr,
            Document::Trace(_) => DocKind::Trace,
            Document::Metrics(_) => DocKind::Metrics,
        }
    }

    fn body(&self) -> Value {
        let v = match self {
            Document::Scenario(x) => serde_json::to_value(x),
            Document::Product(x) => serde_json::to_value(x),
            Document::Request(x) => serde_json::to_value(x),
            Document::Catalog(x) => serde_json::to_value(x),
            Document::FinalReport(x) => serde_json::to_value(x),
            Document::Etr(x) => serde_json::to_value(x),
            Document::Trace(x) => serde_json::to_value(x),
            Document::Metrics(x) => serde_json::to_value(x),
        };
        v.expect("document types serialize")
    }

    /// Pretty JSON envelope, newline-terminated.
    pub fn to_json(&self) -> String {
        let envelope = serde_json::json!({
            "version": FORMAT_VERSION,
            "kind": self.kind(),
            "body": self.body(),
        });
        let mut text = serde_json::to_string_pretty(&envelope).expect("value serializes");
        text.push('\n');
        text
    }
}

/// One problem found in a document. `path` is a JSON-pointer-like location.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

fn negative_counts(value: &Value, path: &str, out: &mut Vec<Diagnostic>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let here = format!("{path}/{k}");
                if COUNT_FIELDS.contains(&k.as_str()) && v.as_f64().is_some_and(|n| n < 0.0) {
                    out.push(Diagnostic::new(
                        here.clone(),
                        format!("invariant violated: {k} is {v}, counts must be non-negative"),
                    ));
                }
                negative_counts(v, &here, out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                negative_counts(v, &format!("{path}/{i}"), out);
            }
        }
        _ => {}
    }
}

fn decode<T: serde::de::DeserializeOwned>(body: Value) -> Result<T, Vec<Diagnostic>> {
    serde_json::from_value(body).map_err(|e| {
        vec![Diagnostic::new(
            "/body",
            format!("does not match schema: {e}"),
        )]
    })
}

fn semantic(doc: &Document) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |path: &str, msg: String| out.push(Diagnostic::new(path, msg));
    match doc {
        Document::Scenario(s) => {
            if let Err(e) = s.validate() {
                push("/body", e.to_string());
            }
        }
        Document::Product(p) => {
            if let Err(e) = validate_product(p) {
                push("/body", e.to_string());
            }
        }
        Document::Request(r) => {
            if let Err(e) = validate_product(&r.product) {
                push("/body/product", e.to_string());
            }
            if r.deadline == 0 {
                push("/body/deadline", "deadline must be positive".into());
            }
            if r.techniques.is_empty() {
                push(
                    "/body/techniques",
                    "at least one technique is required".into(),
                );
            }
        }
        Document::Catalog(c) => {
            for (i, t) in c.iter().enumerate() {
                if let Err(e) = validate_technique(t) {
                    push(&format!("/body/{i}"), e.to_string());
                }
            }
        }
        Document::FinalReport(r) => {
            if let Err(e) = r.check() {
                push("/body", e);
            }
        }
        Document::Etr(e) => {
            if let Err(e) = check_etr(e) {
                push("/body", e);
            }
        }
        Document::Trace(t) => {
            if t.version != FORMAT_VERSION {
                push(
                    "/body/version",
                    format!("unsupported trace version {:?}", t.version),
                );
            }
            for (i, r) in t.reports().enumerate() {
                if let Err(e) = r.check() {
                    push(&format!("/body/outcomes/{i}"), e);
                }
            }
        }
        Document::Metrics(m) => {
            for (id, s) in &m.services {
                if s.up_ticks > s.total_ticks || s.busy_ticks > s.up_ticks {
                    push(
                        &format!("/body/services/{id}"),
                        "busy <= up <= total does not hold".into(),
                    );
                }
            }
        }
    }
    out
}

/// Decode a document, or explain every reason it cannot be used.
pub fn validate_document(text: &str) -> Result<Document, Vec<Diagnostic>> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| vec![Diagnostic::new("", format!("malformed JSON: {e}"))])?;
    let Value::Object(mut map) = root else {
        return Err(vec![Diagnostic::new("", "expected a JSON object envelope")]);
    };
    let mut problems = Vec::new();
    match map.get("version") {
        Some(Value::String(v)) if v == FORMAT_VERSION => {}
        Some(v) => problems.push(Diagnostic::new(
            "/version",
            format!("unsupported version {v} (expected \"{FORMAT_VERSION}\")"),
        )),
        None => problems.push(Diagnostic::new("/version", "missing version")),
    }
    let kind = match map
        .get("kind")
        .cloned()
        .map(serde_json::from_value::<DocKind>)
    {
        Some(Ok(k)) => Some(k),
        Some(Err(_)) => {
            problems.push(Diagnostic::new(
                "/kind",
                format!("unknown document kind {}", map["kind"]),
            ));
            None
        }
        None => {
            problems.push(Diagnostic::new("/kind", "missing kind"));
            None
        }
    };
    let Some(body) = map.remove("body") else {
        problems.push(Diagnostic::new("/body", "missing body"));
        return Err(problems);
    };
    negative_counts(&body, "/body", &mut problems);
    let Some(kind) = kind else {
        return Err(problems);
    };
    if !problems.is_empty() {
        return Err(problems);
    }
    let doc = match kind {
        DocKind::Scenario => Document::Scenario(decode(body)?),
        DocKind::Product => Document::Product(decode(body)?),
        DocKind::Request => Document::Request(decode(body)?),
        DocKind::Catalog => Document::Catalog(decode(body)?),
        DocKind::FinalReport => Document::FinalReport(decode(body)?),
        DocKind::Etr => Document::Etr(decode(body)?),
        DocKind::Trace => Document::Trace(Box::new(decode(body)?)),
        DocKind::Metrics => Document::Metrics(decode(body)?),
    };
    let problems = semantic(&doc);
    if problems.is_empty() {
        Ok(doc)
    } else {
        Err(problems)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures;

    #[test]
    fn product_round_trips() {
        let doc = Document::Product(fixtures::product("P1", &[1.0, 2.5]));
        assert_eq!(validate_document(&doc.to_json()).unwrap(), doc);
    }

    #[test]
    fn wrong_version_is_named() {
        let text = Document::Catalog(vec![fixtures::technique("unit", 10.0, 3)])
            .to_json()
            .replace("\"v1\"", "\"v9\"");
        let errs = validate_document(&text).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(
            errs[0].to_string().contains("unsupported version \"v9\""),
            "{}",
            errs[0]
        );
    }

    #[test]
    fn negative_count_is_an_invariant_violation() {
        let text = r#"{"version":"v1","kind":"etr","body":{"cloud_id":"C1","technique_id":"unit",
            "total_cases":-3,"total_defects":0,"cpu_time":1,"elapsed":1,"eptr_count":1}}"#;
        let errs = validate_document(text).unwrap_err();
        assert_eq!(errs[0].path, "/body/total_cases");
        assert!(errs[0].message.starts_with("invariant violated"));
    }

    #[test]
    fn inconsistent_etr_is_rejected() {
        let text = r#"{"version":"v1","kind":"etr","body":{"cloud_id":"C1","technique_id":"unit",
            "total_cases":3,"total_defects":9,"cpu_time":1,"elapsed":1,"eptr_count":1}}"#;
        assert!(validate_document(text).is_err());
    }

    #[test]
    fn malformed_and_unknown_inputs() {
        assert!(validate_document("{").unwrap_err()[0]
            .message
            .starts_with("malformed JSON"));
        let errs = validate_document(r#"{"version":"v1","kind":"poem","body":{}}"#).unwrap_err();
        assert_eq!(errs[0].path, "/kind");
        let errs =
            validate_document(r#"{"version":"v1","kind":"product","body":{"product_id":"P"}}"#)
                .unwrap_err();
        assert!(errs[0].message.contains("schema"));
    }
}
