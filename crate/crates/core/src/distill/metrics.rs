//! Line-delimited metric records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Appends one JSON object per line; a sink without a file discards records.
#[derive(Debug, Default)]
pub struct MetricsWriter {
    out: Option<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn discard() -> Self {
        Self { out: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::Path {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            out: Some(BufWriter::new(f)),
        })
    }

    pub fn record<R: Serialize>(&mut self, rec: &R) -> Result<()> {
        if let Some(w) = &mut self.out {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }
}
