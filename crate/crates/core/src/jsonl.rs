//! Line-delimited JSON files: one record per line, appended with a single
//! write per line so a crash can only leave a partial final line.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {detail}")]
    Schema { path: PathBuf, line: usize, detail: String },
}

impl JsonlError {
    fn io(path: &Path, source: io::Error) -> Self {
        JsonlError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn parse_lines<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| JsonlError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Reads every record; any malformed line is an error.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let text = std::fs::read_to_string(path).map_err(|e| JsonlError::io(path, e))?;
    parse_lines(path, &text)
}

/// Like [`read_records`], but a missing file reads as empty and an
/// unterminated final line is cut off the file before parsing.
pub fn read_records_repairing<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(JsonlError::io(path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    if complete.len() != text.len() {
        log::warn!(
            "{}: dropping {} bytes of incomplete trailing record",
            path.display(),
            text.len() - complete.len()
        );
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| JsonlError::io(path, e))?;
        file.set_len(complete.len() as u64).map_err(|e| JsonlError::io(path, e))?;
    }
    parse_lines(path, complete)
}

/// Writes all records to `path`, replacing it atomically.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| JsonlError::io(path, e.into()))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Replaces `path` with `bytes` via a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), JsonlError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| JsonlError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| JsonlError::io(path, e))
}

/// Serialized appends to one file.
#[derive(Debug)]
pub struct Appender {
    path: PathBuf,
    file: Mutex<File>,
}

impl Appender {
    pub fn open(path: &Path) -> Result<Self, JsonlError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| JsonlError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<(), JsonlError> {
        let mut line = serde_json::to_vec(record).map_err(|e| JsonlError::io(&self.path, e.into()))?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(&line).map_err(|e| JsonlError::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        k: u32,
    }

    #[test]
    fn append_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let app = Appender::open(&path).unwrap();
        app.append(&Row { k: 1 }).unwrap();
        app.append(&Row { k: 2 }).unwrap();
        assert_eq!(read_records::<Row>(&path).unwrap(), vec![Row { k: 1 }, Row { k: 2 }]);
    }

    #[test]
    fn repair_truncates_partial_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        std::fs::write(&path, "{\"k\":1}\n{\"k\":").unwrap();
        assert!(read_records::<Row>(&path).is_err());
        assert_eq!(read_records_repairing::<Row>(&path).unwrap(), vec![Row { k: 1 }]);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "{\"k\":1}\n");
        assert!(read_records_repairing::<Row>(&dir.path().join("missing")).unwrap().is_empty());
    }

    #[test]
    fn schema_error_has_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        std::fs::write(&path, "{\"k\":1}\n{\"k\":\"x\"}\n").unwrap();
        match read_records::<Row>(&path) {
            Err(JsonlError::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_records(&path, &[Row { k: 5 }]).unwrap();
        write_records(&path, &[Row { k: 6 }]).unwrap();
        assert_eq!(read_records::<Row>(&path).unwrap(), vec![Row { k: 6 }]);
    }
}
