//! Typed tables written as CSV (with `#` footer lines) and aligned markdown.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{usage, CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            // Debug keeps a decimal point and round-trips exactly
            Cell::Float(v) => format!("{v:?}"),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    fn human(&self) -> String {
        match self {
            Cell::Float(v) if v.is_finite() && *v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e6) => format!("{v:.4e}"),
            Cell::Float(v) => format!("{v:.6}"),
            Cell::Bool(true) => "PASS".into(),
            Cell::Bool(false) => "FAIL".into(),
            other => other.csv(),
        }
    }

    fn parse(s: &str) -> Cell {
        if let Ok(v) = s.parse::<i64>() {
            return Cell::Int(v);
        }
        match s {
            "true" => return Cell::Bool(true),
            "false" => return Cell::Bool(false),
            _ => {}
        }
        let numeric = s.contains('.') || s.contains('e') || matches!(s, "inf" | "-inf" | "NaN");
        match s.parse::<f64>() {
            Ok(v) if numeric => Cell::Float(v),
            _ => Cell::Text(s.to_string()),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Float(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            _ => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub footer: Vec<String>,
    /// Whether the command prints this table to stdout.
    pub echo: bool,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            footer: Vec::new(),
            echo: true,
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width differs from header in {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::csv)).expect("in-memory write");
        }
        let mut out = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells");
        for f in &self.footer {
            out.push_str("# ");
            out.push_str(f);
            out.push('\n');
        }
        out
    }

    pub fn from_csv(name: &str, text: &str) -> CliResult<Table> {
        let mut body = String::new();
        let mut footer = Vec::new();
        for line in text.lines() {
            match line.strip_prefix('#') {
                Some(f) => footer.push(f.trim_start().to_string()),
                None => {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let columns = r
            .headers()
            .map_err(|e| CliError::Usage(format!("{name}: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::Usage(format!("{name}: {e}")))?;
            rows.push(rec.iter().map(Cell::parse).collect());
        }
        Ok(Table {
            name: name.to_string(),
            columns,
            rows,
            footer,
            echo: true,
        })
    }

    pub fn to_markdown(&self) -> String {
        let text: Vec<Vec<String>> = self.rows.iter().map(|r| r.iter().map(Cell::human).collect()).collect();
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|j| text.iter().map(|r| r[j].len()).chain([self.columns[j].len(), 3]).max().unwrap_or(3))
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let mut out = format!("### {}\n\n", self.name);
        out += &line(&self.columns);
        out += &line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
        for r in &text {
            out += &line(r);
        }
        if !self.footer.is_empty() {
            out.push('\n');
            for f in &self.footer {
                out += &format!("{f}  \n");
            }
        }
        out
    }

    pub fn all_pass(&self) -> bool {
        match self.column("pass") {
            Some(j) => self.rows.iter().all(|r| r[j] != Cell::Bool(false)),
            None => true,
        }
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| CliError::Usage(format!("cannot write {}: {}", path.display(), e.error)))?;
    Ok(())
}

/// Emits `<name>.csv` and `<name>.md` for each table.
pub fn write_tables(dir: &Path, tables: &[Table]) -> CliResult<()> {
    for t in tables {
        if t.name.contains(['/', '\\']) {
            return usage(format!("bad table name {}", t.name));
        }
        write_atomic(&dir.join(format!("{}.csv", t.name)), t.to_csv().as_bytes())?;
        write_atomic(&dir.join(format!("{}.md", t.name)), t.to_markdown().as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_keeps_types() {
        let mut t = Table::new("demo", &["name", "count", "value", "pass"]);
        t.push(vec!["a,b".into(), 3usize.into(), 1.0.into(), true.into()]);
        t.push(vec!["c".into(), 0usize.into(), 1e-300.into(), false.into()]);
        t.push(vec!["d".into(), 7usize.into(), (0.1 + 0.2).into(), true.into()]);
        t.footer.push("config_sha256=abc".into());
        let back = Table::from_csv("demo", &t.to_csv()).unwrap();
        assert_eq!(back, t);
        assert!(!t.all_pass());
    }

    #[test]
    fn markdown_is_aligned() {
        let mut t = Table::new("m", &["x", "longer"]);
        t.push(vec![1.5.into(), "v".into()]);
        let md = t.to_markdown();
        let widths: Vec<usize> = md.lines().filter(|l| l.starts_with('|')).map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
    }
}
