//! Summaries as ordered key/value records and delimited data files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::CliError;

/// Ordered key/value record rendered as `key=value` lines or JSON.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    entries: Map<String, Value>,
}

impl Summary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.entries.insert(key.to_string(), value.into());
        self
    }

    /// Floats are stored so that non-finite values survive JSON.
    pub fn num(&mut self, key: &str, value: f64) -> &mut Self {
        let v = serde_json::Number::from_f64(value)
            .map(Value::Number)
            .unwrap_or_else(|| Value::String(value.to_string()));
        self.put(key, v)
    }

    pub fn nums(&mut self, key: &str, values: &[f64]) -> &mut Self {
        let v: Vec<Value> = values
            .iter()
            .map(|x| {
                serde_json::Number::from_f64(*x)
                    .map(Value::Number)
                    .unwrap_or_else(|| Value::String(x.to_string()))
            })
            .collect();
        self.put(key, Value::Array(v))
    }

    pub fn nest(&mut self, key: &str, inner: Summary) -> &mut Self {
        self.put(key, Value::Object(inner.entries))
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("summary serialises")
    }

    /// `key=value` lines; nested records flatten to `outer.inner=value`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        flatten(&mut out, "", &self.entries);
        out
    }

    pub fn render(&self, json: bool) -> String {
        if json {
            let mut s = self.to_json();
            s.push('\n');
            s
        } else {
            self.to_text()
        }
    }
}

fn flatten(out: &mut String, prefix: &str, map: &Map<String, Value>) {
    for (k, v) in map {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Object(inner) => flatten(out, &key, inner),
            _ => {
                let _ = writeln!(out, "{key}={}", scalar_text(v));
            }
        }
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(scalar_text).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Tab-delimited table with a header row.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut text = header.join("\t");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join("\t"));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_summary(dir: &Path, summary: &Summary, json: bool) -> Result<(), CliError> {
    let name = if json { "summary.json" } else { "summary.txt" };
    fs::write(dir.join(name), summary.render(json))?;
    Ok(())
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_json_keep_insertion_order() {
        let mut inner = Summary::new();
        inner.put("status", "pass").num("ratio", 0.5);
        let mut s = Summary::new();
        s.put("zeta", 1).num("alpha", 2.5).nums("x", &[1.0, f64::NAN]).nest("check", inner);
        assert_eq!(s.to_text(), "zeta=1\nalpha=2.5\nx=1.0,NaN\ncheck.status=pass\ncheck.ratio=0.5\n");
        let j = s.to_json();
        assert!(j.find("zeta").unwrap() < j.find("alpha").unwrap());
        assert!(j.contains("\"NaN\""));
    }

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        write_table(&p, &["a".into(), "b".into()], &[vec!["1".into(), "2".into()]]).unwrap();
        assert_eq!(fs::read_to_string(p).unwrap(), "a\tb\n1\t2\n");
        assert_eq!(fmt_f64(0.25), "2.5e-1");
    }
}
