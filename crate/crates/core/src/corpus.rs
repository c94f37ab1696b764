//! Document ingestion, tokenization and sentence splitting.
//!
//! A corpus file is UTF-8 JSONL: one object per line with a required `id`
//! and `text` and an optional flat `meta` object of string values. The same
//! format is used when a corpus is persisted, so `ingest(write(c)) == c`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Ordered lowercased tokens. Never contains an empty string.
pub type TokenSeq = Vec<String>;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate document id {id:?} (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("corpus {0} contains no documents")]
    Empty(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), meta: BTreeMap::new() }
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("document id is empty".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("document {:?} has empty text", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub tokens: TokenSeq,
}

/// A document together with its derived token stream and sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestedDoc {
    pub doc: Document,
    pub tokens: TokenSeq,
    pub sentences: Vec<Sentence>,
}

impl IngestedDoc {
    pub fn new(doc: Document) -> Self {
        let tokens = tokenize(&doc.text);
        let sentences = split_sentences(&doc);
        Self { doc, tokens, sentences }
    }

    pub fn id(&self) -> &str {
        &self.doc.id
    }
}

/// Immutable document collection in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    docs: Vec<IngestedDoc>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus from in-memory documents, enforcing the same
    /// invariants as [`ingest`]. Line numbers in errors are 1-based positions
    /// in `docs`.
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for (i, doc) in docs.into_iter().enumerate() {
            corpus.push(doc, i + 1)?;
        }
        Ok(corpus)
    }

    fn push(&mut self, doc: Document, line: usize) -> Result<(), CorpusError> {
        doc.validate().map_err(|reason| CorpusError::Malformed { line, reason })?;
        if self.by_id.contains_key(&doc.id) {
            return Err(CorpusError::DuplicateId { id: doc.id, line });
        }
        self.by_id.insert(doc.id.clone(), self.docs.len());
        self.docs.push(IngestedDoc::new(doc));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[IngestedDoc] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&IngestedDoc> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Writes the corpus as JSONL, one document per line, in corpus order.
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for d in &self.docs {
            serde_json::to_writer(&mut out, &d.doc)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

/// Lowercases, splits on Unicode whitespace and strips leading and trailing
/// punctuation from each token. Interior punctuation survives.
pub fn tokenize(text: &str) -> TokenSeq {
    text.to_lowercase()
        .split_whitespace()
        .map(|raw| raw.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Splits on `.`, `!` or `?` when followed by whitespace or end of text.
/// The terminator itself is dropped and each sentence is trimmed.
pub fn split_sentences(doc: &Document) -> Vec<Sentence> {
    let text = doc.text.as_str();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !is_terminator(c) {
            continue;
        }
        let at_boundary = match chars.peek() {
            None => true,
            Some(&(_, next)) => next.is_whitespace(),
        };
        if at_boundary {
            pieces.push(&text[start..i]);
            start = i + c.len_utf8();
        }
    }
    pieces.push(&text[start..]);

    pieces
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(index, s)| Sentence { doc_id: doc.id.clone(), index, text: s.to_owned(), tokens: tokenize(s) })
        .collect()
}

/// Reads a JSONL corpus file. Blank lines are skipped; everything else must
/// be a valid document record.
pub fn ingest(path: &Path) -> Result<Corpus, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_owned(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut corpus = Corpus::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed { line: line_no, reason: e.to_string() })?;
        corpus.push(doc, line_no)?;
    }
    if corpus.is_empty() {
        return Err(CorpusError::Empty(path.to_owned()));
    }
    Ok(corpus)
}
