//! Versioned CSV/JSON artifacts: the ranked plan table, the simulation
//! document and the combined report that joins them.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::cost::PartitionPlan;
use crate::scalar::Scalar;
use crate::simulator::{SimConfig, SimReport, StageTimes, Validation};
use crate::strategy::FusionStrategy;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReportError {
    #[error("SchemaMismatch: {0}")]
    SchemaMismatch(String),
    #[error("MalformedInput: {0}")]
    Malformed(String),
}

impl ReportError {
    pub fn name(&self) -> &'static str {
        match self {
            ReportError::SchemaMismatch(_) => "SchemaMismatch",
            ReportError::Malformed(_) => "MalformedInput",
        }
    }
}

/// One row of the ranked candidate table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub cut: usize,
    pub theta1: FusionStrategy,
    pub theta2: FusionStrategy,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub t_total: f64,
    #[serde(rename = "dA")]
    pub d_a: f64,
    #[serde(rename = "L")]
    pub lagrangian: f64,
    pub feasible1: bool,
    pub feasible2: bool,
}

impl PlanRow {
    pub fn from_plan<T: Scalar>(plan: &PartitionPlan<T>) -> Self {
        let c = &plan.cost;
        PlanRow {
            cut: plan.cut_index,
            theta1: plan.theta1,
            theta2: plan.theta2,
            t1: c.t1.as_f64(),
            t2: c.t2.as_f64(),
            t3: c.t3.as_f64(),
            t_total: c.t_total.as_f64(),
            d_a: c.d_a_total.as_f64(),
            lagrangian: c.lagrangian.as_f64(),
            feasible1: plan.feasible.0,
            feasible2: plan.feasible.1,
        }
    }

    /// Service times of the pipeline this plan induces.
    pub fn stage_times(&self) -> StageTimes {
        StageTimes::new(self.t1, self.t3, self.t2)
    }
}

/// The ranked candidate table plus the metadata written as `#` comments.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanTable {
    pub schema_version: u64,
    pub model: String,
    pub device1: String,
    pub device2: String,
    pub lambda1: f64,
    pub refined_lambda: Option<f64>,
    /// Boundary chosen after snapping `refined_lambda`.
    pub refined_cut: Option<usize>,
    /// Best first.
    pub rows: Vec<PlanRow>,
}

impl PlanTable {
    pub fn best(&self) -> Option<&PlanRow> {
        self.rows.first()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# schema_version: {}\n", self.schema_version));
        out.push_str(&format!("# model: {}\n", self.model));
        out.push_str(&format!("# device1: {}\n", self.device1));
        out.push_str(&format!("# device2: {}\n", self.device2));
        out.push_str(&format!("# lambda1: {}\n", self.lambda1));
        if let Some(l) = self.refined_lambda {
            out.push_str(&format!("# refined_lambda: {l}\n"));
        }
        if let Some(k) = self.refined_cut {
            out.push_str(&format!("# refined_cut: {k}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("writing to memory");
        }
        let body = w.into_inner().expect("writing to memory");
        out.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, ReportError> {
        let mut meta = Map::new();
        for line in text.lines().filter_map(|l| l.strip_prefix('#')) {
            if let Some((k, v)) = line.split_once(':') {
                meta.insert(k.trim().to_string(), Value::String(v.trim().to_string()));
            }
        }
        let field = |key: &str| -> Result<String, ReportError> {
            meta.get(key)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| ReportError::Malformed(format!("plan header lacks `{key}`")))
        };
        let number = |key: &str| -> Result<f64, ReportError> {
            field(key)?
                .parse()
                .map_err(|_| ReportError::Malformed(format!("plan header `{key}` is not a number")))
        };
        let schema_version = number("schema_version")? as u64;
        if schema_version != SCHEMA_VERSION {
            return Err(ReportError::SchemaMismatch(format!(
                "plan schema_version {schema_version}, expected {SCHEMA_VERSION}"
            )));
        }
        let refined_lambda = match meta.contains_key("refined_lambda") {
            true => Some(number("refined_lambda")?),
            false => None,
        };
        let refined_cut = match meta.contains_key("refined_cut") {
            true => Some(number("refined_cut")? as usize),
            false => None,
        };
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let rows = reader
            .deserialize()
            .collect::<Result<Vec<PlanRow>, _>>()
            .map_err(|e| ReportError::Malformed(e.to_string()))?;
        Ok(PlanTable {
            schema_version,
            model: field("model")?,
            device1: field("device1")?,
            device2: field("device2")?,
            lambda1: number("lambda1")?,
            refined_lambda,
            refined_cut,
            rows,
        })
    }
}

/// JSON document written by a simulation run.
pub fn sim_document(
    model: &str,
    plan: Option<&PlanRow>,
    config: &SimConfig,
    report: &SimReport,
    validation: Option<&Validation>,
) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "model": model,
        "plan": plan,
        "config": config,
        "report": report,
        "validation": validation,
    })
}

fn is_empty_section(v: Option<&Value>) -> bool {
    match v {
        None | Some(Value::Null) => true,
        Some(Value::Object(m)) => m.is_empty(),
        _ => false,
    }
}

/// Joins a plan table and an optional simulation document.
///
/// Without a simulation section the result is flagged `analytical_only`.
pub fn combine(plan: &PlanTable, sim: Option<&Value>) -> Result<Value, ReportError> {
    let sim = sim.filter(|s| !is_empty_section(Some(s)) && !is_empty_section(s.get("report")));
    if let Some(doc) = sim {
        let version = doc.get("schema_version").and_then(Value::as_u64);
        if version != Some(SCHEMA_VERSION) {
            return Err(ReportError::SchemaMismatch(format!(
                "simulation schema_version {version:?}, expected {SCHEMA_VERSION}"
            )));
        }
        let model = doc.get("model").and_then(Value::as_str);
        if model != Some(plan.model.as_str()) {
            return Err(ReportError::SchemaMismatch(format!(
                "model `{}` in plan, `{}` in simulation",
                plan.model,
                model.unwrap_or("<missing>")
            )));
        }
    }
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "model": plan.model,
        "device1": plan.device1,
        "device2": plan.device2,
        "lambda1": plan.lambda1,
        "refined_lambda": plan.refined_lambda,
        "refined_cut": plan.refined_cut,
        "analytical_only": sim.is_none(),
        "candidates": plan.rows.len(),
        "best": plan.best(),
        "analytic_throughput": plan.best().map(|r| r.stage_times().bottleneck_rate()),
        "simulation": sim.map(|d| json!({
            "plan": d.get("plan"),
            "config": d.get("config"),
            "report": d.get("report"),
            "validation": d.get("validation"),
        })),
    }))
}
