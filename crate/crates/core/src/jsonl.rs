//! JSON Lines helpers shared by the stores and stage runners.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Decode {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl JsonlError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        JsonlError::Io { path: path.to_path_buf(), source }
    }
}

/// Reads every record; a missing file reads as empty.
pub fn read_all<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| JsonlError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| JsonlError::Decode {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Like [`read_all`] but stops quietly at a torn final line, which is what an
/// interrupted appender leaves behind.
pub fn read_all_tolerant<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| JsonlError::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (idx, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(record) => out.push(record),
            Err(_) if idx + 1 == lines.len() && !text.ends_with('\n') => {
                tracing::warn!(path = %path.display(), "ignoring torn trailing record");
            }
            Err(source) => {
                return Err(JsonlError::Decode { path: path.to_path_buf(), line: idx + 1, source })
            }
        }
    }
    Ok(out)
}

/// Writes records to `path` through a temporary file and rename, so readers
/// never observe a half-written file. Returns the record count.
pub fn write_all<'a, T, I>(path: &Path, records: I) -> Result<usize, JsonlError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| JsonlError::io(parent, e))?;
    }
    let tmp = tmp_path(path);
    let file = File::create(&tmp).map_err(|e| JsonlError::io(&tmp, e))?;
    let mut writer = BufWriter::new(file);
    let mut count = 0;
    for record in records {
        serde_json::to_writer(&mut writer, record)
            .map_err(|source| JsonlError::Encode { path: path.to_path_buf(), source })?;
        writer.write_all(b"\n").map_err(|e| JsonlError::io(&tmp, e))?;
        count += 1;
    }
    let file = writer.into_inner().map_err(|e| JsonlError::io(&tmp, e.into_error()))?;
    file.sync_all().map_err(|e| JsonlError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| JsonlError::io(path, e))?;
    Ok(count)
}

/// Appends records and fsyncs.
pub fn append<'a, T, I>(path: &Path, records: I) -> Result<usize, JsonlError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| JsonlError::io(parent, e))?;
    }
    let mut buf = Vec::new();
    let mut count = 0;
    for record in records {
        serde_json::to_writer(&mut buf, record)
            .map_err(|source| JsonlError::Encode { path: path.to_path_buf(), source })?;
        buf.push(b'\n');
        count += 1;
    }
    truncate_torn_tail(path)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| JsonlError::io(path, e))?;
    file.write_all(&buf).map_err(|e| JsonlError::io(path, e))?;
    file.sync_all().map_err(|e| JsonlError::io(path, e))?;
    Ok(count)
}

/// Cuts a partial final line left by an interrupted append.
fn truncate_torn_tail(path: &Path) -> Result<(), JsonlError> {
    use std::io::{Read, Seek, SeekFrom};
    let mut file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(JsonlError::io(path, e)),
    };
    let len = file.metadata().map_err(|e| JsonlError::io(path, e))?.len();
    if len == 0 {
        return Ok(());
    }
    let mut last = [0u8; 1];
    file.seek(SeekFrom::Start(len - 1))
        .and_then(|_| file.read_exact(&mut last))
        .map_err(|e| JsonlError::io(path, e))?;
    if last[0] == b'\n' {
        return Ok(());
    }
    let bytes = fs::read(path).map_err(|e| JsonlError::io(path, e))?;
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let file = OpenOptions::new().write(true).open(path).map_err(|e| JsonlError::io(path, e))?;
    file.set_len(keep as u64).map_err(|e| JsonlError::io(path, e))?;
    file.sync_all().map_err(|e| JsonlError::io(path, e))
}

/// Writes a JSON document atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), JsonlError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| JsonlError::io(parent, e))?;
    }
    let tmp = tmp_path(path);
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|source| JsonlError::Encode { path: path.to_path_buf(), source })?;
    bytes.push(b'\n');
    fs::write(&tmp, bytes).map_err(|e| JsonlError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| JsonlError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, JsonlError> {
    let bytes = fs::read(path).map_err(|e| JsonlError::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|source| JsonlError::Decode { path: path.to_path_buf(), line: 0, source })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
