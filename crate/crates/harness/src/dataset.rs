//! JSONL datasets: raw `{id, context, knowledge, reference}` records and
//! token-labeled examples for scorer training.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use kcd_core::grounding::{GroundedExample, LabelScheme, LabeledExample};
use kcd_core::lm::Vocabulary;
use kcd_core::text::normalize_tokens;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field {field:?}")]
    MissingField { field: &'static str, line: usize },
    #[error("line {line}: token {token:?} is not in the model vocabulary")]
    UnknownToken { token: String, line: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// Nonblank lines with their 1-based numbers.
fn lines(path: &Path) -> Result<Vec<(usize, String)>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_object(line: usize, text: &str) -> Result<serde_json::Map<String, Value>, DatasetError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(DatasetError::Parse { line, message: "expected a JSON object".into() }),
        Err(e) => Err(DatasetError::Parse { line, message: e.to_string() }),
    }
}

fn string_field<'a>(
    map: &'a serde_json::Map<String, Value>,
    field: &'static str,
    line: usize,
) -> Result<&'a str, DatasetError> {
    match map.get(field) {
        None | Some(Value::Null) => Err(DatasetError::MissingField { field, line }),
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(DatasetError::Parse { line, message: format!("field {field:?} must be a string") }),
    }
}

fn encode(vocab: &Vocabulary, text: &str, line: usize) -> Result<Vec<usize>, DatasetError> {
    normalize_tokens(text)
        .into_iter()
        .map(|t| vocab.id(&t).ok_or(DatasetError::UnknownToken { token: t, line }))
        .collect()
}

/// Reads `{"id", "context", "knowledge", "reference"}` lines, tokenizing
/// text with the shared normalizer. The reference becomes the example's
/// response.
pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<GroundedExample>, DatasetError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (line, text) in lines(path)? {
        let map = parse_object(line, &text)?;
        let id = string_field(&map, "id", line)?;
        let context = encode(vocab, string_field(&map, "context", line)?, line)?;
        let knowledge = encode(vocab, string_field(&map, "knowledge", line)?, line)?;
        let reference = encode(vocab, string_field(&map, "reference", line)?, line)?;
        let ex = GroundedExample::new(id, context, knowledge, reference)
            .map_err(|e| DatasetError::Parse { line, message: e.to_string() })?;
        out.push(ex);
    }
    Ok(out)
}

#[derive(Serialize)]
struct RawRecord<'a> {
    id: &'a str,
    context: String,
    knowledge: String,
    reference: String,
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[GroundedExample], vocab: &Vocabulary) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut out = String::new();
    for ex in examples {
        let rec = RawRecord {
            id: &ex.id,
            context: vocab.detokenize(&ex.context),
            knowledge: vocab.detokenize(&ex.knowledge),
            reference: vocab.detokenize(&ex.response),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    write_file(path, text.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

/// Labeled example on disk; `response` is a token list so labels align.
#[derive(Serialize, Deserialize)]
struct LabeledRecord {
    id: String,
    context: String,
    knowledge: String,
    response: Vec<String>,
    labels: Vec<u8>,
    inflection: Option<usize>,
    scheme: LabelScheme,
}

pub fn save_labeled(path: impl AsRef<Path>, examples: &[LabeledExample], vocab: &Vocabulary) -> Result<(), DatasetError> {
    let mut out = String::new();
    for ex in examples {
        let rec = LabeledRecord {
            id: ex.base.id.clone(),
            context: vocab.detokenize(&ex.base.context),
            knowledge: vocab.detokenize(&ex.base.knowledge),
            response: vocab.decode(&ex.base.response),
            labels: ex.labels.clone(),
            inflection: ex.inflection,
            scheme: ex.scheme,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    write_file(path.as_ref(), out.as_bytes())
}

pub fn load_labeled(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<LabeledExample>, DatasetError> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (line, text) in lines(path)? {
        let rec: LabeledRecord =
            serde_json::from_str(&text).map_err(|e| DatasetError::Parse { line, message: e.to_string() })?;
        let response = rec
            .response
            .iter()
            .map(|t| vocab.id(t).ok_or_else(|| DatasetError::UnknownToken { token: t.clone(), line }))
            .collect::<Result<Vec<_>, _>>()?;
        let base = GroundedExample::new(
            rec.id,
            encode(vocab, &rec.context, line)?,
            encode(vocab, &rec.knowledge, line)?,
            response,
        )
        .map_err(|e| DatasetError::Parse { line, message: e.to_string() })?;
        let ex = LabeledExample { base, labels: rec.labels, inflection: rec.inflection, scheme: rec.scheme };
        ex.validate().map_err(|message| DatasetError::Parse { line, message })?;
        out.push(ex);
    }
    Ok(out)
}
