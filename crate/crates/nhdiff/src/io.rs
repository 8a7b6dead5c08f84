//! CSV and JSON artifact helpers shared by the output writers.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Shortest-safe round-trip formatting with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    format!("{x:.16e}")
}

/// RFC-4180 table builder; numeric cells go through [`fmt17`].
pub struct Csv {
    buf: String,
    width: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = String::new();
        let cells: Vec<String> = header.iter().map(|h| quote(h)).collect();
        buf.push_str(&cells.join(","));
        buf.push_str("\r\n");
        Csv { buf, width: header.len() }
    }

    pub fn row(&mut self, cells: &[f64]) {
        debug_assert_eq!(cells.len(), self.width);
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                self.buf.push(',');
            }
            self.buf.push_str(&fmt17(*c));
        }
        self.buf.push_str("\r\n");
    }

    /// Row whose leading cells are integers (ids, indices).
    pub fn row_with_ids(&mut self, ids: &[u64], cells: &[f64]) {
        debug_assert_eq!(ids.len() + cells.len(), self.width);
        for (i, id) in ids.iter().enumerate() {
            if i > 0 {
                self.buf.push(',');
            }
            let _ = write!(self.buf, "{id}");
        }
        for c in cells {
            self.buf.push(',');
            self.buf.push_str(&fmt17(*c));
        }
        self.buf.push_str("\r\n");
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\r', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `contents` and returns its SHA-256 checksum.
pub fn write_artifact(path: &Path, contents: &[u8]) -> Result<String> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(sha256_hex(contents))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))
}
