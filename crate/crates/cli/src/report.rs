//! The structured run report and the flat exports derived from it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fbsde_core::coefficients::ConditionReport;
use fbsde_core::continuation::{ResidualRecord, SolveDiagnostics};
use fbsde_core::suite::CriterionOutcome;
use fbsde_core::tree::{AdaptedProcess, Field, TreeTopology};
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const SCHEMA: &str = "fbsde-report/1";
pub const REPORT_FILE: &str = "report.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NotConverged,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct TopologyRecord {
    pub horizon: usize,
    pub branching: usize,
    pub support: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub level_sizes: Vec<usize>,
}

impl TopologyRecord {
    pub fn new(topology: &TreeTopology) -> Self {
        Self {
            horizon: topology.horizon(),
            branching: topology.branching(),
            support: topology.law().support().to_vec(),
            probabilities: topology.law().probabilities().to_vec(),
            level_sizes: (0..=topology.horizon()).map(|k| topology.level_size(k)).collect(),
        }
    }
}

/// An adapted process: `values[k - start][node][component]`.
#[derive(Debug, Clone, Serialize)]
pub struct ProcessRecord {
    pub name: String,
    pub start: usize,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl ProcessRecord {
    pub fn new(name: &str, process: &AdaptedProcess) -> Self {
        Self::from_fields(name, process.start(), process.fields())
    }

    pub fn from_fields(name: &str, start: usize, fields: &[Field]) -> Self {
        let values = fields
            .iter()
            .map(|field| (0..field.nodes()).map(|node| field.at(node).to_vec()).collect())
            .collect();
        Self {
            name: name.to_string(),
            start,
            values,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SolutionRecord {
    pub processes: Vec<ProcessRecord>,
    pub quantities: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub mode: &'static str,
    pub status: Status,
    pub seeds: BTreeMap<&'static str, u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologyRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solution: Option<SolutionRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<SolveDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<ResidualRecord>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub residuals: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<ConditionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimates: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub optimality: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suite: Option<Vec<CriterionOutcome>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Report {
    pub fn new(mode: &'static str) -> Self {
        Self {
            schema: SCHEMA,
            mode,
            status: Status::Ok,
            seeds: BTreeMap::new(),
            topology: None,
            solution: None,
            diagnostics: None,
            residual: None,
            residuals: BTreeMap::new(),
            conditions: None,
            estimates: None,
            optimality: BTreeMap::new(),
            suite: None,
            error: None,
        }
    }

    pub fn solution_mut(&mut self) -> &mut SolutionRecord {
        self.solution.get_or_insert_with(SolutionRecord::default)
    }

    pub fn to_json(&self) -> CliResult<String> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Failure(format!("cannot encode report: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    /// One row per process value.
    pub fn trajectories(&self) -> Table {
        let mut table = Table::new(&["process", "time", "node", "component", "value"]);
        for process in self.solution.iter().flat_map(|s| &s.processes) {
            for (offset, level) in process.values.iter().enumerate() {
                for (node, values) in level.iter().enumerate() {
                    for (component, value) in values.iter().enumerate() {
                        table.push(vec![
                            process.name.clone(),
                            (process.start + offset).to_string(),
                            node.to_string(),
                            component.to_string(),
                            number(*value),
                        ]);
                    }
                }
            }
        }
        table
    }

    /// Suite rows, ladder rows or checker rows, whichever the report holds.
    pub fn diagnostics_table(&self) -> Option<Table> {
        if let Some(outcomes) = &self.suite {
            let mut table = Table::new(&["criterion", "name", "label", "value", "relation", "limit", "passed"]);
            for outcome in outcomes {
                if outcome.measurements.is_empty() {
                    table.push(vec![
                        outcome.id.to_string(),
                        outcome.name.to_string(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        outcome.passed.to_string(),
                    ]);
                }
                for m in &outcome.measurements {
                    let relation = serde_json::to_value(m.relation)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_string))
                        .unwrap_or_default();
                    table.push(vec![
                        outcome.id.to_string(),
                        outcome.name.to_string(),
                        m.label.clone(),
                        number(m.value),
                        relation,
                        number(m.limit),
                        m.passed.to_string(),
                    ]);
                }
            }
            return Some(table);
        }
        if let Some(diagnostics) = &self.diagnostics {
            let mut table = Table::new(&[
                "attempt",
                "delta",
                "level",
                "alpha_from",
                "alpha_to",
                "runs",
                "iterations",
                "max_run_iterations",
                "contraction_factor",
                "accepted",
            ]);
            for (index, attempt) in diagnostics.attempts.iter().enumerate() {
                for (level, stats) in attempt.levels.iter().enumerate() {
                    table.push(vec![
                        index.to_string(),
                        number(attempt.delta),
                        level.to_string(),
                        number(stats.alpha_from),
                        number(stats.alpha_to),
                        stats.runs.to_string(),
                        stats.iterations.to_string(),
                        stats.max_run_iterations.to_string(),
                        stats.contraction_factor.map(number).unwrap_or_default(),
                        stats.accepted.to_string(),
                    ]);
                }
            }
            return Some(table);
        }
        let conditions = self.conditions.as_ref()?;
        let mut table = Table::new(&["inequality", "evaluated", "violations", "worst_slack"]);
        for stats in &conditions.inequalities {
            let name = serde_json::to_value(stats.inequality)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            table.push(vec![
                name,
                stats.evaluated.to_string(),
                stats.violations.to_string(),
                stats.worst_slack.map(number).unwrap_or_default(),
            ]);
        }
        Some(table)
    }

    /// Writes the report and its exports into `directory`.
    pub fn write(&self, directory: &Path) -> CliResult<Vec<PathBuf>> {
        fs::create_dir_all(directory).map_err(|source| CliError::Io {
            path: directory.to_path_buf(),
            source,
        })?;
        let mut written = Vec::new();
        let path = directory.join(REPORT_FILE);
        fs::write(&path, self.to_json()?).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
        if self.solution.as_ref().is_some_and(|s| !s.processes.is_empty()) {
            written.push(self.trajectories().write(&directory.join(TRAJECTORIES_FILE))?);
        }
        if let Some(table) = self.diagnostics_table() {
            written.push(table.write(&directory.join(DIAGNOSTICS_FILE))?);
        }
        Ok(written)
    }
}

/// Shortest decimal form that reads back to the same value.
fn number(value: f64) -> String {
    format!("{value:?}")
}

#[derive(Debug, Clone)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> CliResult<PathBuf> {
        let io = |e: csv::Error| CliError::Failure(format!("cannot write {}: {e}", path.display()));
        let mut writer = csv::Writer::from_path(path).map_err(io)?;
        writer.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            writer.write_record(row).map_err(io)?;
        }
        writer.flush().map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(path.to_path_buf())
    }
}
