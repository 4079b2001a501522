//! Append-only JSON-lines journal.
//!
//! Each record is one line. A trailing line without its newline is a torn
//! write from a crash: it is dropped and the file truncated on open.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("journal {path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("injected fault")]
    Injected,
}

pub struct Journal<T> {
    path: PathBuf,
    file: File,
    writes: u64,
    torn_next: Option<usize>,
    _marker: PhantomData<fn(T) -> T>,
}

impl<T> std::fmt::Debug for Journal<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal").field("path", &self.path).field("writes", &self.writes).finish()
    }
}

impl<T: Serialize + DeserializeOwned> Journal<T> {
    /// Opens (creating if needed) and returns every complete record.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<T>), JournalError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| JournalError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io_err)?;
        let (records, good_len) = read_complete(&file, &path)?;
        if file.metadata().map_err(io_err)?.len() != good_len {
            file.set_len(good_len).map_err(io_err)?;
            file.seek(SeekFrom::End(0)).map_err(io_err)?;
        }
        Ok((
            Self {
                path,
                file,
                writes: 0,
                torn_next: None,
                _marker: PhantomData,
            },
            records,
        ))
    }

    pub fn append(&mut self, record: &T) -> Result<(), JournalError> {
        let mut line = serde_json::to_string(record).expect("journal records serialize");
        line.push('\n');
        if let Some(keep) = self.torn_next.take() {
            let keep = keep.min(line.len().saturating_sub(1));
            self.write(&line.as_bytes()[..keep])?;
            return Err(JournalError::Injected);
        }
        self.write(line.as_bytes())?;
        self.writes += 1;
        Ok(())
    }

    fn write(&mut self, bytes: &[u8]) -> Result<(), JournalError> {
        let r = self.file.write_all(bytes).and_then(|_| self.file.sync_data());
        r.map_err(|source| JournalError::Io {
            path: self.path.clone(),
            source,
        })
    }

    /// Drops every record; used after a snapshot supersedes them.
    pub fn truncate(&mut self) -> Result<(), JournalError> {
        let r = self.file.set_len(0).and_then(|_| self.file.sync_data());
        r.map_err(|source| JournalError::Io {
            path: self.path.clone(),
            source,
        })
    }

    /// Reads every complete record without opening for writing, so a
    /// journal that another process is appending to can be inspected.
    pub fn read(path: impl AsRef<Path>) -> Result<Vec<T>, JournalError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| JournalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(read_complete(&file, path)?.0)
    }

    /// Number of records appended through this handle.
    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Fault injection: the next append writes only `keep` bytes of its line
    /// and fails, as if the process died mid-write.
    pub fn tear_next_write(&mut self, keep: usize) {
        self.torn_next = Some(keep);
    }
}

/// Complete records and the byte length they span; a torn tail is skipped.
fn read_complete<T: DeserializeOwned>(file: &File, path: &Path) -> Result<(Vec<T>, u64), JournalError> {
    let io_err = |source| JournalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io_err)?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            tracing::warn!(path = %path.display(), "ignoring torn journal tail");
            break;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                return Err(JournalError::Corrupt {
                    path: path.to_path_buf(),
                    line: lineno,
                    reason: e.to_string(),
                })
            }
        }
        good_len += n as u64;
    }
    Ok((records, good_len))
}

/// Writes `bytes` to `path` through a temporary file and an atomic rename.
pub fn atomic_write_bytes(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_data()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
