//! Corpus files: a JSON header line followed by one JSON document per line.
//!
//! ```text
//! {"format":"docrel-corpus","version":1,"num_docs":2}
//! {"doc_id":"...","sentences":[[...]],"entities":[...],"gold_facts":[...]}
//! {"doc_id":"...", ...}
//! ```

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Document;
use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "docrel-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    num_docs: usize,
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        num_docs: docs.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let format_err = |message: String| Error::Format {
        path: path.to_owned(),
        message,
    };
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| format_err("missing header line".into()))??;
    let header: Header = serde_json::from_str(&header_line)
        .map_err(|e| format_err(format!("bad header: {e}")))?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(format_err(format!(
            "expected {CORPUS_FORMAT} v{CORPUS_VERSION}, found {} v{}",
            header.format, header.version
        )));
    }
    let mut docs = Vec::with_capacity(header.num_docs);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| format_err(format!("line {}: {e}", i + 2)))?;
        doc.validate(None)?;
        docs.push(doc);
    }
    if docs.len() != header.num_docs {
        return Err(format_err(format!(
            "header promises {} documents, found {}",
            header.num_docs,
            docs.len()
        )));
    }
    Ok(docs)
}
