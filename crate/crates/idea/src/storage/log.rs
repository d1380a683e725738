//! Optional append-only persistence log, one file per dataset partition.
//! Entries are an op tag plus a length-prefixed serialized record; replay
//! rebuilds the partition at startup. Durability beyond replay (fsync,
//! compaction, recovery guarantees) is out of scope.

use crate::data::{deserialize_record, Record};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogOp {
    Insert,
    Upsert,
}

pub struct PartitionLog {
    writer: BufWriter<File>,
    path: PathBuf,
}

impl std::fmt::Debug for PartitionLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PartitionLog").field("path", &self.path).finish()
    }
}

impl PartitionLog {
    /// Replays any existing log at `path`, then opens it for appending.
    pub fn open(path: &Path) -> std::io::Result<(PartitionLog, Vec<(LogOp, Record)>)> {
        let mut replayed = Vec::new();
        if path.exists() {
            let mut bytes = Vec::new();
            File::open(path)?.read_to_end(&mut bytes)?;
            let mut pos = 0usize;
            while pos + 5 <= bytes.len() {
                let op = match bytes[pos] {
                    0 => LogOp::Insert,
                    1 => LogOp::Upsert,
                    _ => break,
                };
                let len =
                    u32::from_be_bytes(bytes[pos + 1..pos + 5].try_into().unwrap()) as usize;
                if pos + 5 + len > bytes.len() {
                    break; // truncated tail from an interrupted write
                }
                match deserialize_record(&bytes[pos + 5..pos + 5 + len]) {
                    Ok(rec) => replayed.push((op, rec)),
                    Err(_) => break,
                }
                pos += 5 + len;
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((
            PartitionLog {
                writer: BufWriter::new(file),
                path: path.to_path_buf(),
            },
            replayed,
        ))
    }

    pub fn append(&mut self, op: LogOp, record_bytes: &[u8]) -> std::io::Result<()> {
        let tag = match op {
            LogOp::Insert => 0u8,
            LogOp::Upsert => 1u8,
        };
        self.writer.write_all(&[tag])?;
        self.writer
            .write_all(&(record_bytes.len() as u32).to_be_bytes())?;
        self.writer.write_all(record_bytes)?;
        self.writer.flush()
    }
}
