//! Workload trace files: CSV, one request per line, header required.
//!
//! ```text
//! arrival_s,kv_full_bytes,compression_ratio,output_tokens
//! 0.0,4000000000,0.25,256
//! ```
//!
//! An optional fifth column `speculating` (`true`/`false`) marks requests that
//! decode on full KV without speculation; it defaults to `true`. Request ids
//! are assigned in file order starting at 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Request};

pub const TRACE_COLUMNS: [&str; 4] = ["arrival_s", "kv_full_bytes", "compression_ratio", "output_tokens"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace header must contain {0}")]
    MissingColumn(&'static str),
    #[error("trace line {line}: {source}")]
    Row { line: u64, source: csv::Error },
    #[error("trace line {line}: {source}")]
    Invalid { line: u64, source: ConfigError },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    arrival_s: f64,
    kv_full_bytes: u64,
    compression_ratio: f64,
    output_tokens: u32,
    #[serde(default = "yes")]
    speculating: bool,
}

fn yes() -> bool {
    true
}

pub fn parse_trace(text: &str) -> Result<Vec<Request>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    for col in TRACE_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(TraceError::MissingColumn(col));
        }
    }
    let mut out = Vec::new();
    for (id, row) in rdr.deserialize::<TraceRow>().enumerate() {
        // header occupies line 1
        let line = id as u64 + 2;
        let row = row.map_err(|source| TraceError::Row { line, source })?;
        let req = Request {
            id: id as u64,
            arrival: row.arrival_s,
            kv_full_bytes: row.kv_full_bytes,
            compression_ratio: row.compression_ratio,
            output_tokens: row.output_tokens,
            speculating: row.speculating,
        };
        req.validate().map_err(|source| TraceError::Invalid { line, source })?;
        out.push(req);
    }
    Ok(out)
}

pub fn write_trace(requests: &[Request]) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in requests {
        wtr.serialize(TraceRow {
            arrival_s: r.arrival,
            kv_full_bytes: r.kv_full_bytes,
            compression_ratio: r.compression_ratio,
            output_tokens: r.output_tokens,
            speculating: r.speculating,
        })
        .expect("in-memory csv write");
    }
    String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows_in_order() {
        let text = "arrival_s,kv_full_bytes,compression_ratio,output_tokens\n0.0,4000000000,0.25,256\n1.5,2000,1.0,1\n";
        let reqs = parse_trace(text).unwrap();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[1].id, 1);
        assert_eq!(reqs[1].arrival, 1.5);
        assert!(reqs[0].speculating);
        assert_eq!(reqs[0].compressed_bytes(), 1_000_000_000);
    }

    #[test]
    fn header_is_required() {
        let err = parse_trace("0.0,4000000000,0.25,256\n").unwrap_err();
        assert!(matches!(err, TraceError::MissingColumn("arrival_s")));
    }

    #[test]
    fn invalid_row_names_line() {
        let text = "arrival_s,kv_full_bytes,compression_ratio,output_tokens\n0.0,10,0.25,5\n0.0,10,1.3,5\n";
        let err = parse_trace(text).unwrap_err();
        assert!(err.to_string().starts_with("trace line 3"), "{err}");
    }

    #[test]
    fn optional_speculating_column() {
        let text = "arrival_s,kv_full_bytes,compression_ratio,output_tokens,speculating\n0,10,0.5,3,false\n";
        assert!(!parse_trace(text).unwrap()[0].speculating);
    }

    #[test]
    fn write_then_parse() {
        let text = "arrival_s,kv_full_bytes,compression_ratio,output_tokens\n0.25,4096,0.125,9\n";
        let reqs = parse_trace(text).unwrap();
        assert_eq!(parse_trace(&write_trace(&reqs)).unwrap(), reqs);
    }
}
