use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{LoopIndexDistribution, SuiteResult};
use crate::error::{Error, Result};
use crate::inference::InferMode;

/// Closed-loop results of one checkpoint under one selection mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub theta: Option<f64>,
    pub loops: usize,
    pub max_iterations: usize,
    /// Half-open seed range `[start, end)`.
    pub seeds: [u64; 2],
    pub execute: usize,
    /// Top-1 agreement of `argmax p~` with the lowest-loss iteration.
    pub agreement: f64,
    pub mean_visited: f64,
    pub flops_per_action: f64,
    pub suites: Vec<SuiteResult>,
}

/// JSON schema every serialized [`EvalReport`] satisfies.
pub const REPORT_SCHEMA: &str = r#"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "EvalReport",
  "type": "object",
  "required": ["mode", "theta", "loops", "max_iterations", "seeds", "execute",
               "agreement", "mean_visited", "flops_per_action", "suites"],
  "additionalProperties": false,
  "properties": {
    "mode": {"type": "string"},
    "theta": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
    "loops": {"type": "integer", "minimum": 1},
    "max_iterations": {"type": "integer", "minimum": 1},
    "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
    "execute": {"type": "integer", "minimum": 0},
    "agreement": {"type": "number", "minimum": 0, "maximum": 1},
    "mean_visited": {"type": "number", "minimum": 0},
    "flops_per_action": {"type": "number", "minimum": 0},
    "suites": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["difficulty", "episodes", "successes", "success_rate",
                     "n_star_histogram", "mean_visited", "decisions"],
        "additionalProperties": false,
        "properties": {
          "difficulty": {"enum": ["easy", "medium", "hard"]},
          "episodes": {"type": "integer", "minimum": 1},
          "successes": {"type": "integer", "minimum": 0},
          "success_rate": {"type": "number", "minimum": 0, "maximum": 1},
          "n_star_histogram": {"type": "array", "items": {"type": "integer", "minimum": 0}},
          "mean_visited": {"type": "number", "minimum": 0},
          "decisions": {"type": "integer", "minimum": 0}
        }
      }
    }
  }
}"#;

fn type_matches(v: &Value, ty: &str) -> bool {
    match ty {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64(),
        "null" => v.is_null(),
        "boolean" => v.is_boolean(),
        _ => false,
    }
}

/// Interprets the schema keywords used by [`REPORT_SCHEMA`]: `type`,
/// `enum`, `required`, `properties`, `additionalProperties: false`, `items`,
/// `minItems`, `maxItems`, `minimum`, `maximum` and `exclusiveMinimum`.
fn check(schema: &Value, v: &Value, path: &str, errors: &mut Vec<String>) {
    if let Some(ty) = schema.get("type") {
        let ok = match ty {
            Value::String(t) => type_matches(v, t),
            Value::Array(ts) => ts.iter().filter_map(Value::as_str).any(|t| type_matches(v, t)),
            _ => true,
        };
        if !ok {
            errors.push(format!("{path}: expected type {ty}"));
            return;
        }
    }
    if let Some(Value::Array(options)) = schema.get("enum") {
        if !options.contains(v) {
            errors.push(format!("{path}: {v} not in {}", Value::Array(options.clone())));
        }
    }
    if let Some(x) = v.as_f64() {
        if let Some(min) = schema.get("minimum").and_then(Value::as_f64) {
            if x < min {
                errors.push(format!("{path}: {x} < {min}"));
            }
        }
        if let Some(max) = schema.get("maximum").and_then(Value::as_f64) {
            if x > max {
                errors.push(format!("{path}: {x} > {max}"));
            }
        }
        if let Some(min) = schema.get("exclusiveMinimum").and_then(Value::as_f64) {
            if x <= min {
                errors.push(format!("{path}: {x} <= {min}"));
            }
        }
    }
    if let Value::Object(map) = v {
        let props = schema.get("properties").and_then(Value::as_object);
        if let Some(Value::Array(req)) = schema.get("required") {
            for k in req.iter().filter_map(Value::as_str) {
                if !map.contains_key(k) {
                    errors.push(format!("{path}: missing '{k}'"));
                }
            }
        }
        for (k, child) in map {
            match props.and_then(|p| p.get(k)) {
                Some(sub) => check(sub, child, &format!("{path}/{k}"), errors),
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    errors.push(format!("{path}: unexpected '{k}'"))
                }
                None => {}
            }
        }
    }
    if let Value::Array(items) = v {
        let len = items.len() as u64;
        if schema.get("minItems").and_then(Value::as_u64).is_some_and(|m| len < m) {
            errors.push(format!("{path}: too few items"));
        }
        if schema.get("maxItems").and_then(Value::as_u64).is_some_and(|m| len > m) {
            errors.push(format!("{path}: too many items"));
        }
        if let Some(sub) = schema.get("items") {
            for (i, item) in items.iter().enumerate() {
                check(sub, item, &format!("{path}/{i}"), errors);
            }
        }
    }
}

fn schema() -> &'static Value {
    static S: OnceLock<Value> = OnceLock::new();
    S.get_or_init(|| serde_json::from_str(REPORT_SCHEMA).expect("schema literal parses"))
}

/// Checks `report` against [`REPORT_SCHEMA`] plus the cross-field rules the
/// schema cannot express: the mode string parses, histogram length equals
/// `max_iterations` and sums to the decision count, successes never exceed
/// episodes.
pub fn validate_report(report: &Value) -> Result<()> {
    let mut errors = Vec::new();
    check(schema(), report, "", &mut errors);
    if !errors.is_empty() {
        return Err(Error::Report(format!("report violates schema: {}", errors.join("; "))));
    }
    let parsed: EvalReport = serde_json::from_value(report.clone())?;
    parsed.mode.parse::<InferMode>().map_err(|e| Error::Report(e.to_string()))?;
    for s in &parsed.suites {
        if s.successes > s.episodes {
            return Err(Error::Report(format!("{}: {} successes of {} episodes", s.difficulty, s.successes, s.episodes)));
        }
        if s.n_star_histogram.len() != parsed.max_iterations {
            return Err(Error::Report(format!("{}: histogram has {} bins", s.difficulty, s.n_star_histogram.len())));
        }
        if s.n_star_histogram.iter().sum::<usize>() != s.decisions {
            return Err(Error::Report(format!("{}: histogram does not sum to the decision count", s.difficulty)));
        }
    }
    Ok(())
}

impl EvalReport {
    /// One row per suite.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Report(format!("csv: {e}"));
        w.write_record(["difficulty", "mode", "episodes", "successes", "success_rate", "mean_visited"])
            .map_err(csv_err)?;
        for s in &self.suites {
            w.write_record([
                s.difficulty.name().to_string(),
                self.mode.clone(),
                s.episodes.to_string(),
                s.successes.to_string(),
                s.success_rate.to_string(),
                s.mean_visited.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }
}

/// Long-format histogram: one row per loop index with a count column per suite.
pub fn histogram_csv(dists: &[LoopIndexDistribution]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Report(format!("csv: {e}"));
    let mut header = vec!["n".to_string()];
    header.extend(dists.iter().map(|d| d.difficulty.name().to_string()));
    w.write_record(&header).map_err(csv_err)?;
    let bins = dists.iter().map(|d| d.histogram.len()).max().unwrap_or(0);
    for n in 0..bins {
        let mut row = vec![(n + 1).to_string()];
        row.extend(dists.iter().map(|d| d.histogram.get(n).copied().unwrap_or(0).to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}
