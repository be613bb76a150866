//! Line-delimited JSON exchange files.
//!
//! Every writer emits a one-line header object `{"schema": "..."}` first.
//! Readers accept files with or without that header; a header naming a
//! different schema is reported as a malformed line.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LineDiagnostic, Result};

/// How a reader reacts to malformed lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Any malformed line fails the whole read.
    Strict,
    /// Malformed lines are skipped and reported as diagnostics.
    #[default]
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub records: Vec<T>,
    pub diagnostics: Vec<LineDiagnostic>,
}

impl<T> Default for Parsed<T> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            diagnostics: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
}

const MAX_REPORTED: usize = 10;

/// Reads `reader` line by line, deserializing each line as `W` and handing it
/// to `accept`, which may reject it with a message.
pub fn read_records<R, W, T>(
    reader: R,
    schema: &str,
    mode: ParseMode,
    mut accept: impl FnMut(W) -> std::result::Result<T, String>,
) -> Result<Parsed<T>>
where
    R: BufRead,
    W: DeserializeOwned,
{
    let mut out = Parsed::default();
    let mut seen_content = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let first = !seen_content;
        seen_content = true;
        if first && trimmed.contains("\"schema\"") {
            if let Ok(header) = serde_json::from_str::<Header>(trimmed) {
                if header.schema != schema {
                    out.diagnostics.push(LineDiagnostic {
                        line: lineno,
                        message: format!(
                            "header declares schema `{}`, expected `{schema}`",
                            header.schema
                        ),
                    });
                }
                continue;
            }
        }
        let result = serde_json::from_str::<W>(trimmed)
            .map_err(|e| e.to_string())
            .and_then(&mut accept);
        match result {
            Ok(record) => out.records.push(record),
            Err(message) => out.diagnostics.push(LineDiagnostic {
                line: lineno,
                message,
            }),
        }
    }
    if mode == ParseMode::Strict && !out.diagnostics.is_empty() {
        return Err(Error::Parse {
            count: out.diagnostics.len(),
            offenders: out.diagnostics.into_iter().take(MAX_REPORTED).collect(),
        });
    }
    Ok(out)
}

pub fn write_header<W: Write>(mut w: W, schema: &str) -> std::io::Result<()> {
    serde_json::to_writer(
        &mut w,
        &Header {
            schema: schema.to_string(),
        },
    )?;
    w.write_all(b"\n")
}

pub fn write_record<W: Write, T: Serialize>(mut w: W, record: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, record)?;
    w.write_all(b"\n")
}
