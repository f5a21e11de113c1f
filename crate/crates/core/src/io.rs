//! On-disk formats.
//!
//! Objects are stored in a JSON container:
//!
//! ```json
//! {"format": "baselayer", "schema_version": 1, "kind": "token_batch", "payload": {...}}
//! ```
//!
//! Floats are written with shortest round-trip formatting and parsed exactly,
//! so a save/load cycle is bit-exact.
//!
//! Matrices are exchanged as CSV. The first record holds the shape as
//! `rows=<R>,cols=<C>`; each following record is one row. Lines starting
//! with `#` are ignored.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{ExpertSet, Matrix, ScoreMatrix, TokenBatch};

pub const FORMAT_NAME: &str = "baselayer";
pub const SCHEMA_VERSION: u32 = 1;

/// A type that can be stored in the versioned container.
pub trait Persist: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

impl Persist for TokenBatch {
    const KIND: &'static str = "token_batch";
}

impl Persist for ExpertSet {
    const KIND: &'static str = "expert_set";
}

#[derive(Serialize)]
struct ContainerRef<'a, T> {
    format: &'a str,
    schema_version: u32,
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a serde_json::Value>,
    payload: &'a T,
}

#[derive(Deserialize)]
struct Container<T> {
    format: String,
    schema_version: u32,
    kind: String,
    payload: T,
}

pub fn to_json<T: Persist>(value: &T) -> Result<String> {
    to_json_with_config(value, None)
}

/// Like [`to_json`], recording the settings that produced `value` next to it.
pub fn to_json_with_config<T: Persist>(
    value: &T,
    config: Option<&serde_json::Value>,
) -> Result<String> {
    let c = ContainerRef {
        format: FORMAT_NAME,
        schema_version: SCHEMA_VERSION,
        kind: T::KIND,
        config,
        payload: value,
    };
    serde_json::to_string(&c).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_json<T: Persist>(text: &str) -> Result<T> {
    let c: Container<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if c.format != FORMAT_NAME {
        return Err(Error::Format(format!(
            "unknown container format {:?}",
            c.format
        )));
    }
    if c.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported schema version {} (expected {SCHEMA_VERSION})",
            c.schema_version
        )));
    }
    if c.kind != T::KIND {
        return Err(Error::Format(format!(
            "expected a {}, found a {}",
            T::KIND,
            c.kind
        )));
    }
    serde_json::from_value(c.payload).map_err(|e| Error::Format(e.to_string()))
}

pub fn save<T: Persist>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn load<T: Persist>(path: impl AsRef<Path>) -> Result<T> {
    from_json(&std::fs::read_to_string(path)?)
}

pub fn write_matrix_csv<W: Write>(m: &Matrix, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(e.to_string());
    w.write_record([format!("rows={}", m.rows()), format!("cols={}", m.cols())])
        .map_err(csv_err)?;
    for row in m.iter_rows() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut buf = Vec::new();
    write_matrix_csv(m, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

fn parse_dim(field: Option<&str>, key: &str, line: u64) -> Result<usize> {
    field
        .and_then(|f| f.trim().strip_prefix(key))
        .and_then(|f| f.strip_prefix('='))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("line {line}: expected header field {key}=<n>")))
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(input);
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Format("line 1: missing rows=/cols= header".into()))?
        .map_err(|e| Error::Format(e.to_string()))?;
    let hline = header.position().map_or(1, |p| p.line());
    if header.len() != 2 {
        return Err(Error::Format(format!(
            "line {hline}: header must have exactly two fields"
        )));
    }
    let rows = parse_dim(header.get(0), "rows", hline)?;
    let cols = parse_dim(header.get(1), "cols", hline)?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for rec in records {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols {
            return Err(Error::Format(format!(
                "line {line}: expected {cols} values, found {}",
                rec.len()
            )));
        }
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("line {line}: cannot parse {field:?} as a number"))
            })?;
            data.push(v);
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Format(format!(
            "header declares {rows} rows, found {seen}"
        )));
    }
    Matrix::new(rows, cols, data)
}

pub fn load_scores_csv(path: impl AsRef<Path>) -> Result<ScoreMatrix> {
    let file = std::fs::File::open(path)?;
    ScoreMatrix::new(read_matrix_csv(file)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ExpertSet;

    #[test]
    fn csv_roundtrip_is_exact() {
        let m =
            Matrix::from_rows(&[vec![0.1, -2.5e-300, 3.0], vec![1.0 / 3.0, 7.0, -0.0]]).unwrap();
        let text = matrix_to_csv(&m);
        assert!(text.starts_with("rows=2,cols=3\n"));
        assert_eq!(read_matrix_csv(text.as_bytes()).unwrap(), m);
        let commented = format!("# produced by a test\n{text}");
        assert_eq!(read_matrix_csv(commented.as_bytes()).unwrap(), m);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = read_matrix_csv("rows=2,cols=2\n1,2\n3,x\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = read_matrix_csv("rows=2,cols=2\n1,2\n3\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = read_matrix_csv("1,2\n3,4\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(read_matrix_csv("rows=3,cols=2\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn container_rejects_wrong_kind_and_version() {
        let set = ExpertSet::init(0, 2, 2, 1).unwrap();
        let text = to_json(&set).unwrap();
        assert!(from_json::<TokenBatch>(&text).is_err());
        let bumped = text.replace("\"schema_version\":1", "\"schema_version\":2");
        assert!(from_json::<ExpertSet>(&bumped).is_err());
        assert_eq!(from_json::<ExpertSet>(&text).unwrap(), set);
        let with_config = to_json_with_config(&set, Some(&serde_json::json!({"seed": 3}))).unwrap();
        assert!(with_config.contains("\"config\":{\"seed\":3}"));
        assert_eq!(from_json::<ExpertSet>(&with_config).unwrap(), set);
    }
}
