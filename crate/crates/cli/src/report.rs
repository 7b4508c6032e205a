//! Tables, verification outcomes and deterministic JSON/CSV emission.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;

/// Column-major metadata plus row values. Every column carries a unit.
#[derive(Clone, Debug, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub units: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: &[(&str, &str)]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.0.to_string()).collect(),
            units: columns.iter().map(|c| c.1.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    /// RFC-4180 CSV with a header row of column names.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(cell))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub description: String,
    /// Largest observed deviation (or violation count) against `tolerance`.
    pub observed: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub passed: bool,
    pub details: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub command: String,
    pub config: RunConfig,
    pub tables: BTreeMap<String, Table>,
    pub checks: Vec<CheckOutcome>,
    pub summary: BTreeMap<String, Value>,
}

impl Report {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            tables: BTreeMap::new(),
            checks: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Pretty JSON with object keys sorted at every depth.
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("report is serializable");
        let mut s = serde_json::to_string_pretty(&sorted(v)).expect("value is serializable");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(format!("{}_report.json", self.command)), self.to_json())?;
        Ok(())
    }
}

pub fn sorted(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let b: BTreeMap<String, Value> = m.into_iter().map(|(k, v)| (k, sorted(v))).collect();
            Value::Object(b.into_iter().collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sorted).collect()),
        other => other,
    }
}

/// Wall-clock per phase, kept out of the deterministic report.
#[derive(Debug, Default, Serialize)]
pub struct Timing {
    pub phases: Vec<(String, f64)>,
}

impl Timing {
    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = std::time::Instant::now();
        let out = f();
        self.phases.push((name.to_string(), t.elapsed().as_secs_f64()));
        out
    }

    pub fn write(&self, dir: &Path, command: &str) -> Result<()> {
        let mut t = Table::new(&[("phase", "label"), ("seconds", "s")]);
        for (n, s) in &self.phases {
            t.push(vec![n.clone().into(), (*s).into()]);
        }
        t.write_csv(&dir.join(format!("{command}_timing.csv")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_keys_sorted_and_csv_quoted() {
        let mut r = Report::new("x", &RunConfig::default());
        r.summary.insert("zeta".into(), 1.into());
        r.summary.insert("alpha".into(), 2.into());
        let j = r.to_json();
        assert!(j.find("\"alpha\"").unwrap() < j.find("\"zeta\"").unwrap());
        assert!(j.find("\"checks\"").unwrap() < j.find("\"command\"").unwrap());

        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(&[("name", "label"), ("value", "1")]);
        t.push(vec!["a,b".into(), 0.5.into()]);
        let p = dir.path().join("t.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "name,value\n\"a,b\",0.5\n");
    }
}
