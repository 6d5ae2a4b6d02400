//! Journal file: one JSON object per line, UTF-8, tagged by `kind`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BounceRecordDoc, DeadLetterRecord, IdempotencyKey, StoreError, SuppressionEntry};
use crate::domain::{Campaign, EmailAddress, Template};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Bounce(BounceRecordDoc),
    Suppress(SuppressionEntry),
    Unsuppress { address: EmailAddress },
    Claim(IdempotencyKey),
    ReleaseClaim(IdempotencyKey),
    TemplatePut(Template),
    TemplateDelete { template_id: String },
    Campaign(Box<Campaign>),
    DeadLetter(DeadLetterRecord),
}

pub(super) struct Journal {
    file: File,
}

fn io_err(e: impl std::fmt::Display) -> StoreError {
    StoreError::Io(e.to_string())
}

impl Journal {
    pub fn open(path: &Path) -> Result<(Journal, Vec<Record>), StoreError> {
        let mut records = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let record = serde_json::from_str(&line)
                    .map_err(|e| StoreError::Io(format!("{}:{}: {e}", path.display(), n + 1)))?;
                records.push(record);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        Ok((Journal { file }, records))
    }

    pub fn append(&mut self, record: &Record) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(record).map_err(io_err)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err)
    }
}
