//! Line-delimited corpus files: a header record, then one record per line.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::task::{PairExample, ToyTaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusHeader {
    Pairs {
        spec: ToyTaskSpec,
        seed: u64,
        count: usize,
    },
    Text {
        seed: u64,
        count: usize,
        max_len: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TextRecord {
    tokens: Vec<u32>,
}

fn to_lines<T: Serialize>(header: &CorpusHeader, records: &[T]) -> Result<String> {
    let mut s = serde_json::to_string(header)?;
    s.push('\n');
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn write_new(path: &Path, body: &str, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::Path {
            path: path.to_path_buf(),
            reason: "exists; pass --overwrite to replace it".into(),
        });
    }
    fs::write(path, body).map_err(|e| Error::Path {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_lines(path: &Path) -> Result<(CorpusHeader, Vec<String>)> {
    let f = fs::File::open(path).map_err(|e| Error::Path {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))??;
    let header: CorpusHeader = serde_json::from_str(&header)
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?;
    let rest = lines.collect::<std::io::Result<Vec<_>>>()?;
    Ok((header, rest.into_iter().filter(|l| !l.trim().is_empty()).collect()))
}

pub fn write_pairs(path: &Path, header: &CorpusHeader, pairs: &[PairExample], overwrite: bool) -> Result<()> {
    write_new(path, &to_lines(header, pairs)?, overwrite)
}

pub fn read_pairs(path: &Path) -> Result<(ToyTaskSpec, Vec<PairExample>)> {
    let (header, lines) = read_lines(path)?;
    let CorpusHeader::Pairs { spec, .. } = header else {
        return Err(Error::Data(format!("{} is not a pair corpus", path.display())));
    };
    let pairs = lines
        .iter()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("bad pair record: {e}"))))
        .collect::<Result<Vec<PairExample>>>()?;
    Ok((spec, pairs))
}

pub fn write_text(path: &Path, header: &CorpusHeader, seqs: &[Vec<u32>], overwrite: bool) -> Result<()> {
    let recs: Vec<TextRecord> = seqs.iter().map(|t| TextRecord { tokens: t.clone() }).collect();
    write_new(path, &to_lines(header, &recs)?, overwrite)
}

pub fn read_text(path: &Path) -> Result<Vec<Vec<u32>>> {
    let (header, lines) = read_lines(path)?;
    if !matches!(header, CorpusHeader::Text { .. }) {
        return Err(Error::Data(format!("{} is not a text corpus", path.display())));
    }
    lines
        .iter()
        .map(|l| {
            serde_json::from_str::<TextRecord>(l)
                .map(|r| r.tokens)
                .map_err(|e| Error::Data(format!("bad text record: {e}")))
        })
        .collect()
}
