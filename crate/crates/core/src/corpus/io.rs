//! Text input and JSON-lines persistence of packed sequences.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SplitLabel, TokenId, TokenSequence};
use crate::error::{Error, Result};

/// Where a generated record's prompt came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt_id: usize,
    pub prompt_source: String,
}

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    id: String,
    tokens: Vec<TokenId>,
    split: SplitLabel,
    #[serde(flatten, skip_serializing_if = "Option::is_none", default)]
    provenance: Option<Provenance>,
}

#[derive(Deserialize)]
struct TextLine {
    text: String,
}

/// Reads one record per line. A file whose first non-blank line starts with
/// `{` is parsed as JSON lines with a `text` field. Blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    parse_records(lines)
}

pub fn parse_records(lines: Vec<String>) -> Result<Vec<String>> {
    let json = lines
        .first()
        .is_some_and(|l| l.trim_start().starts_with('{'));
    if !json {
        return Ok(lines);
    }
    lines
        .iter()
        .map(|l| Ok(serde_json::from_str::<TextLine>(l)?.text))
        .collect()
}

pub fn write_sequences(path: &Path, seqs: &[TokenSequence]) -> Result<()> {
    write_lines(path, seqs.iter().map(|s| (s, None)))
}

pub fn write_sequences_with_provenance(
    path: &Path,
    seqs: &[(TokenSequence, Provenance)],
) -> Result<()> {
    write_lines(path, seqs.iter().map(|(s, p)| (s, Some(p))))
}

fn write_lines<'a>(
    path: &Path,
    rows: impl Iterator<Item = (&'a TokenSequence, Option<&'a Provenance>)>,
) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for (s, p) in rows {
        let line = SequenceLine {
            id: s.id.clone(),
            tokens: s.tokens.clone(),
            split: s.split,
            provenance: p.cloned(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_sequences(path: &Path) -> Result<Vec<TokenSequence>> {
    Ok(read_sequences_with_provenance(path)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

pub fn read_sequences_with_provenance(
    path: &Path,
) -> Result<Vec<(TokenSequence, Option<Provenance>)>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SequenceLine = serde_json::from_str(&line)?;
        out.push((
            TokenSequence::new(row.id, row.tokens, row.split),
            row.provenance,
        ));
    }
    Ok(out)
}
