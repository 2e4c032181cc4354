//! File formats: line-delimited record files with a header line, single
//! structured documents, and content digests.
//!
//! Every file carries `format_version`; anything other than
//! [`FORMAT_VERSION`] is rejected on load. Reals are written with the
//! shortest decimal that round-trips, so reading a file back is bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{ConstructionRecord, Example};

pub const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON rendering of `value`.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(&bytes))
}

fn check_version(value: &serde_json::Value, line: usize) -> Result<()> {
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Parse {
            line,
            message: "missing format_version".into(),
        })?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn check_kind(value: &serde_json::Value, kind: &str, line: usize) -> Result<()> {
    match value.get("kind").and_then(serde_json::Value::as_str) {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Parse {
            line,
            message: format!("expected a `{kind}` file, found kind {other:?}"),
        }),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(file))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file))
}

/// Writes a header line followed by one JSON object per record.
pub fn write_jsonl<H, R>(path: &Path, header: &H, records: &[R]) -> Result<()>
where
    H: Serialize,
    R: Serialize,
{
    let mut out = create(path)?;
    write_line(&mut out, header).map_err(|e| Error::io(path, e))?;
    for r in records {
        write_line(&mut out, r).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

/// Reads a file written by [`write_jsonl`], checking version and kind.
pub fn read_jsonl<H, R>(path: &Path, kind: &str) -> Result<(H, Vec<R>)>
where
    H: DeserializeOwned,
    R: DeserializeOwned,
{
    let reader = open(path)?;
    let mut lines = reader.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io(path, e))?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file (missing header)".into(),
            })
        }
    };
    let header_value: serde_json::Value =
        serde_json::from_str(&header_line).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
    check_version(&header_value, 1)?;
    check_kind(&header_value, kind, 1)?;
    let header: H = serde_json::from_value(header_value).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok((header, records))
}

/// Writes one structured JSON document (pretty-printed for inspection).
pub fn write_document<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a document written by [`write_document`], checking version and kind.
pub fn read_document<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    check_version(&value, 1)?;
    check_kind(&value, kind, 1)?;
    serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamplesHeader {
    pub format_version: u32,
    pub kind: String,
    pub feature_dim: usize,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

pub const EXAMPLES_KIND: &str = "examples";

pub fn serialize_examples(set: &[Example], path: &Path) -> Result<()> {
    serialize_examples_with(set, path, None, None)
}

pub fn serialize_examples_with(
    set: &[Example],
    path: &Path,
    world_digest: Option<String>,
    config_digest: Option<String>,
) -> Result<()> {
    let feature_dim = set.first().map_or(0, Example::feature_dim);
    for ex in set {
        ex.validate(feature_dim, None)?;
    }
    let header = ExamplesHeader {
        format_version: FORMAT_VERSION,
        kind: EXAMPLES_KIND.into(),
        feature_dim,
        count: set.len(),
        world_digest,
        config_digest,
    };
    write_jsonl(path, &header, set)
}

pub fn deserialize_examples(path: &Path) -> Result<Vec<Example>> {
    Ok(deserialize_examples_with_header(path)?.1)
}

pub fn deserialize_examples_with_header(path: &Path) -> Result<(ExamplesHeader, Vec<Example>)> {
    let (header, set): (ExamplesHeader, Vec<Example>) = read_jsonl(path, EXAMPLES_KIND)?;
    if set.len() != header.count {
        return Err(Error::Schema(format!(
            "header declares {} examples, file holds {}",
            header.count,
            set.len()
        )));
    }
    crate::types::validate_set(&set, header.feature_dim, None)?;
    Ok((header, set))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordsHeader {
    pub format_version: u32,
    pub kind: String,
    pub config_digest: String,
    pub world_digest: String,
    pub anchors: usize,
    pub shots: usize,
    pub beam: usize,
}

pub const RECORDS_KIND: &str = "construction_records";

pub fn write_records(path: &Path, header: &RecordsHeader, records: &[ConstructionRecord]) -> Result<()> {
    write_jsonl(path, header, records)
}

pub fn read_records(path: &Path) -> Result<(RecordsHeader, Vec<ConstructionRecord>)> {
    read_jsonl(path, RECORDS_KIND)
}
