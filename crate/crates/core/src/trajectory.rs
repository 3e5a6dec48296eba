//! Trajectory data model and the JSONL log reader/writer.
//!
//! One log line holds one run of the multi-agent system on one task. Lines
//! are grouped by `task_id` into [`TaskRecord`]s; runs are sorted by
//! `run_index`. Tool calls and tool results are kept as raw strings: a
//! non-string `content` value is stored as its JSON serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Message,
    ToolCall,
    ToolResult,
    FinalAnswer,
}

impl StepKind {
    pub const ALL: [StepKind; 4] = [
        StepKind::Message,
        StepKind::ToolCall,
        StepKind::ToolResult,
        StepKind::FinalAnswer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Message => "message",
            StepKind::ToolCall => "tool_call",
            StepKind::ToolResult => "tool_result",
            StepKind::FinalAnswer => "final_answer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Chain,
    Star,
    Dynamic,
    Other,
}

impl Topology {
    fn parse(s: &str) -> Self {
        match s {
            "chain" => Topology::Chain,
            "star" => Topology::Star,
            "dynamic" => Topology::Dynamic,
            _ => Topology::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub kind: StepKind,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub agent_id: String,
    pub role: String,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrajectory {
    pub run_index: usize,
    pub traces: Vec<AgentTrace>,
    pub final_answer: Option<String>,
    /// Per-run correctness label, when the log carries one.
    pub correct: Option<bool>,
}

impl RunTrajectory {
    pub fn agent_ids(&self) -> BTreeSet<&str> {
        self.traces.iter().map(|t| t.agent_id.as_str()).collect()
    }

    /// The run's answer: `final_answer` if set, otherwise the last
    /// final_answer step in trace order.
    pub fn answer_text(&self) -> Option<&str> {
        if let Some(a) = &self.final_answer {
            return Some(a);
        }
        self.traces
            .iter()
            .flat_map(|t| &t.steps)
            .rfind(|s| s.kind == StepKind::FinalAnswer)
            .map(|s| s.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task_id: String,
    pub input_text: String,
    pub runs: Vec<RunTrajectory>,
    /// Task-level label (from a labels file). See [`TaskRecord::task_label`].
    pub correct: Option<bool>,
    pub topology: Option<Topology>,
}

impl TaskRecord {
    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }

    /// Task-level correctness: the explicit label if set, otherwise the
    /// common per-run label when every run is labelled and all agree.
    pub fn task_label(&self) -> Option<bool> {
        if self.correct.is_some() {
            return self.correct;
        }
        let first = self.runs.first()?.correct?;
        self.runs.iter().all(|r| r.correct == Some(first)).then_some(first)
    }

    /// Per-run labels indexed by position in `runs`.
    pub fn run_labels(&self) -> Vec<Option<bool>> {
        self.runs.iter().map(|r| r.correct).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    InsufficientRuns { n: usize },
    AgentSetMismatch { run_index: usize },
    RunIndexGap { expected: usize, found: usize },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::InsufficientRuns { n } => write!(f, "InsufficientRuns: {n} run(s), need >= 2"),
            Diagnostic::AgentSetMismatch { run_index } => {
                write!(f, "AgentSetMismatch: run {run_index} differs from run set of first run")
            }
            Diagnostic::RunIndexGap { expected, found } => {
                write!(f, "RunIndexGap: expected run {expected}, found {found}")
            }
        }
    }
}

/// Checks the cross-run invariants of a parsed record. Never mutates.
pub fn validate_task_record(rec: &TaskRecord) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if rec.runs.len() < 2 {
        out.push(Diagnostic::InsufficientRuns { n: rec.runs.len() });
    }
    for (expected, run) in rec.runs.iter().enumerate() {
        if run.run_index != expected {
            out.push(Diagnostic::RunIndexGap {
                expected,
                found: run.run_index,
            });
            break;
        }
    }
    if let Some(first) = rec.runs.first() {
        let reference = first.agent_ids();
        for run in &rec.runs[1..] {
            if run.agent_ids() != reference {
                out.push(Diagnostic::AgentSetMismatch {
                    run_index: run.run_index,
                });
            }
        }
    }
    out
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value> {
    obj.get(name)
        .filter(|v| !v.is_null())
        .ok_or_else(|| Error::SchemaViolation(name.to_string()))
}

fn str_field(obj: &Map<String, Value>, name: &str) -> Result<String> {
    field(obj, name)?
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| Error::SchemaViolation(name.to_string()))
}

fn index_field(obj: &Map<String, Value>, name: &str) -> Result<usize> {
    field(obj, name)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::SchemaViolation(name.to_string()))
}

fn opt_str(obj: &Map<String, Value>, name: &str) -> Result<Option<String>> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::SchemaViolation(name.to_string())),
    }
}

fn as_object<'a>(v: &'a Value, name: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::SchemaViolation(name.to_string()))
}

fn parse_step(v: &Value) -> Result<StepRecord> {
    let obj = as_object(v, "steps")?;
    let step_index = index_field(obj, "step_index")?;
    let kind_str = str_field(obj, "kind")?;
    let kind = StepKind::parse(&kind_str).ok_or_else(|| Error::SchemaViolation("kind".into()))?;
    let content = match field(obj, "content")? {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if content.trim().is_empty() {
        return Err(Error::SchemaViolation("content".into()));
    }
    Ok(StepRecord {
        step_index,
        kind,
        content,
        timestamp: opt_str(obj, "timestamp")?,
    })
}

fn parse_trace(v: &Value) -> Result<AgentTrace> {
    let obj = as_object(v, "traces")?;
    let agent_id = str_field(obj, "agent_id")?;
    let role = str_field(obj, "role")?;
    let mut steps = field(obj, "steps")?
        .as_array()
        .ok_or_else(|| Error::SchemaViolation("steps".into()))?
        .iter()
        .map(parse_step)
        .collect::<Result<Vec<_>>>()?;
    steps.sort_by_key(|s| s.step_index);
    if steps.iter().enumerate().any(|(i, s)| s.step_index != i) {
        return Err(Error::SchemaViolation("step_index".into()));
    }
    Ok(AgentTrace { agent_id, role, steps })
}

struct ParsedLine {
    task_id: String,
    input_text: String,
    topology: Option<Topology>,
    run: RunTrajectory,
}

fn parse_line(v: &Value) -> Result<ParsedLine> {
    let obj = as_object(v, "<root>")?;
    let task_id = str_field(obj, "task_id")?;
    let input_text = str_field(obj, "input_text")?;
    let run_index = index_field(obj, "run_index")?;
    let topology = opt_str(obj, "topology")?.map(|s| Topology::parse(&s));
    let final_answer = opt_str(obj, "final_answer")?;
    let correct = match obj.get("correct") {
        None | Some(Value::Null) => None,
        Some(Value::Bool(b)) => Some(*b),
        Some(_) => return Err(Error::SchemaViolation("correct".into())),
    };
    let traces = field(obj, "traces")?
        .as_array()
        .ok_or_else(|| Error::SchemaViolation("traces".into()))?
        .iter()
        .map(parse_trace)
        .collect::<Result<Vec<_>>>()?;
    let mut seen = BTreeSet::new();
    for t in &traces {
        if !seen.insert(t.agent_id.as_str()) {
            return Err(Error::SchemaViolation("agent_id".into()));
        }
    }
    Ok(ParsedLine {
        task_id,
        input_text,
        topology,
        run: RunTrajectory {
            run_index,
            traces,
            final_answer,
            correct,
        },
    })
}

/// Parses a JSONL trajectory log into task records sorted by `task_id`.
///
/// Blank lines are skipped. Line numbers in errors are 1-based.
pub fn parse_trajectory_log<R: BufRead>(reader: R) -> Result<Vec<TaskRecord>> {
    let mut grouped: BTreeMap<String, Vec<ParsedLine>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedLine(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine(line_no, e.to_string()))?;
        let parsed = parse_line(&value)?;
        grouped.entry(parsed.task_id.clone()).or_default().push(parsed);
    }

    let mut out = Vec::with_capacity(grouped.len());
    for (task_id, mut lines) in grouped {
        lines.sort_by_key(|l| l.run.run_index);
        for pair in lines.windows(2) {
            if pair[0].run.run_index == pair[1].run.run_index {
                return Err(Error::DuplicateRun {
                    task_id,
                    run_index: pair[0].run.run_index,
                });
            }
        }
        let input_text = lines[0].input_text.clone();
        let topology = lines[0].topology;
        out.push(TaskRecord {
            task_id,
            input_text,
            correct: None,
            topology,
            runs: lines.into_iter().map(|l| l.run).collect(),
        });
    }
    Ok(out)
}

pub fn parse_trajectory_str(text: &str) -> Result<Vec<TaskRecord>> {
    parse_trajectory_log(text.as_bytes())
}

#[derive(Serialize)]
struct LogLine<'a> {
    task_id: &'a str,
    input_text: &'a str,
    run_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    topology: Option<Topology>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_answer: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    correct: Option<bool>,
    traces: &'a [AgentTrace],
}

/// Serializes a record back into log lines, one per run.
pub fn to_log_lines(rec: &TaskRecord) -> Vec<String> {
    rec.runs
        .iter()
        .map(|run| {
            let line = LogLine {
                task_id: &rec.task_id,
                input_text: &rec.input_text,
                run_index: run.run_index,
                topology: rec.topology,
                final_answer: run.final_answer.as_deref(),
                correct: run.correct,
                traces: &run.traces,
            };
            serde_json::to_string(&line).expect("log line serializes")
        })
        .collect()
}
