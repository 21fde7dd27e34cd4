//! Line-delimited record files.
//!
//! Every file starts with a header line `#schema=1 <kind>` followed by one
//! JSON record per line. Field names are the serde names of the record type.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::model::Episode;

pub const SCHEMA_VERSION: u32 = 1;
pub const EPISODES_KIND: &str = "episodes";
pub const PSEUDO_LABELS_KIND: &str = "pseudo-labels";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing or malformed schema header (expected `#schema={SCHEMA_VERSION} {expected}`), found {found:?}")]
    Header { expected: String, found: String },
    #[error("line {line}: {source}")]
    Record { line: usize, source: serde_json::Error },
}

pub fn header_line(kind: &str) -> String {
    format!("#schema={SCHEMA_VERSION} {kind}")
}

pub fn write_records<T: Serialize, W: Write>(mut w: W, kind: &str, records: &[T]) -> Result<(), DatasetError> {
    writeln!(w, "{}", header_line(kind))?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|source| DatasetError::Record { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<T: DeserializeOwned, R: Read>(r: R, kind: &str) -> Result<Vec<T>, DatasetError> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let mut parts = header.split_whitespace();
    let ok = parts.next() == Some(format!("#schema={SCHEMA_VERSION}").as_str()) && parts.next() == Some(kind);
    if !ok {
        return Err(DatasetError::Header { expected: kind.to_owned(), found: header });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| DatasetError::Record { line: i + 2, source })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save<T: Serialize>(path: &Path, kind: &str, records: &[T]) -> Result<(), DatasetError> {
    write_records(BufWriter::new(File::create(path)?), kind, records)
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>, DatasetError> {
    read_records(File::open(path)?, kind)
}

pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<(), DatasetError> {
    save(path, EPISODES_KIND, episodes)
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>, DatasetError> {
    load(path, EPISODES_KIND)
}
