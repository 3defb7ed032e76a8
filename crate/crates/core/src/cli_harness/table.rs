//! Result tables and their CSV, JSON and text renderings.

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    /// Numbers use the shortest round-trip scientific form.
    pub fn render(&self) -> String {
        match self {
            Cell::Num(v) => format!("{v:e}"),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Int(i) => Some(*i as f64),
            Cell::Text(s) => s.parse().ok(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Num(v) if v.is_finite() => json!(v),
            Cell::Num(v) => json!(v.to_string()),
            Cell::Int(i) => json!(i),
            Cell::Text(s) => json!(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(if v { "pass" } else { "fail" }.into())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.into())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// Named table with a fixed column set.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width does not match table {}", self.name);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric values of a column (`NaN` where a cell is not numeric).
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i].as_f64().unwrap_or(f64::NAN)).collect())
    }

    pub fn text_column(&self, name: &str) -> Option<Vec<String>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i].render()).collect())
    }

    /// CSV with `# key: value` comment lines ahead of the header row.
    pub fn to_csv(&self, meta: &[(String, String)]) -> Result<String> {
        let mut out = String::new();
        for (k, v) in meta {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(&self.columns).map_err(io)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render)).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))?);
        Ok(out)
    }

    /// `{"meta": {...}, "columns": [...], "rows": [[...], ...]}`; non-finite
    /// numbers become strings.
    pub fn to_json(&self, meta: &[(String, String)]) -> String {
        let m: Map<String, Value> = meta.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| Value::Array(r.iter().map(Cell::to_json).collect()))
            .collect();
        let doc = json!({ "meta": m, "name": self.name, "columns": self.columns, "rows": rows });
        serde_json::to_string_pretty(&doc).expect("table serialises") + "\n"
    }

    /// Read a CSV written by [`Table::to_csv`]; every cell comes back as text.
    pub fn from_csv(name: &str, text: &str) -> Result<Table> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let parse = |e: csv::Error| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, message: e.to_string() }
        };
        let columns: Vec<String> = r.headers().map_err(parse)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(parse)?;
            rows.push(rec.iter().map(|s| Cell::Text(s.to_string())).collect());
        }
        Ok(Table {
            name: name.into(),
            columns,
            rows,
        })
    }

    /// Fixed-width text for terminals.
    pub fn render_text(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|c| match c {
                        Cell::Num(v) => format!("{v:.6e}"),
                        other => other.render(),
                    })
                    .collect()
            })
            .collect();
        let mut width: Vec<usize> = self.columns.iter().map(|c| c.len()).collect();
        for r in &cells {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |r: &[String]| {
            r.iter()
                .zip(&width)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = format!("[{}]\n{}\n", self.name, line(&self.columns));
        for r in &cells {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Table {
        let mut t = Table::new("s", &["a", "b", "note"]);
        t.push(vec![0.1.into(), 1e-300.into(), "x, y".into()]);
        t.push(vec![f64::NAN.into(), 3usize.into(), true.into()]);
        t
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = sample();
        let meta = vec![("seed".to_string(), "4".to_string())];
        let s = t.to_csv(&meta).unwrap();
        assert!(s.starts_with("# seed: 4\na,b,note\n"));
        let back = Table::from_csv("s", &s).unwrap();
        let a = back.column("a").unwrap();
        assert_eq!(a[0].to_bits(), 0.1f64.to_bits());
        assert!(a[1].is_nan());
        assert_eq!(back.column("b").unwrap()[0], 1e-300);
        assert_eq!(back.text_column("note").unwrap(), vec!["x, y".to_string(), "pass".to_string()]);
    }

    #[test]
    fn json_has_columns_and_meta() {
        let v: Value = serde_json::from_str(&sample().to_json(&[("k".into(), "v".into())])).unwrap();
        assert_eq!(v["meta"]["k"], "v");
        assert_eq!(v["columns"][2], "note");
        assert_eq!(v["rows"][1][0], "NaN");
        assert!(sample().render_text().contains("[s]"));
    }
}
