//! BM25 inverted index and the two retrieval entry points used by the loop:
//! plain query retrieval and joint retrieval against the query plus the
//! current output.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, CorpusError, Sentence, TokenSeq};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("corpus contains no tokens")]
    NoTokens,
    #[error("unknown document id {0:?}")]
    UnknownDoc(String),
    #[error("index io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid index file {path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Okapi BM25 saturation and length-normalisation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone)]
pub struct Index {
    corpus: Corpus,
    postings: HashMap<String, Vec<Posting>>,
    doc_lengths: Vec<usize>,
    avg_doc_length: f64,
    params: Bm25Params,
}

/// One ranked document in a [`RetrievedContext`].
#[derive(Debug, Clone, PartialEq)]
pub struct Passage {
    pub doc_id: String,
    pub score: f64,
    pub sentences: Vec<Sentence>,
}

/// The context set handed to the generator: ranked, scored documents.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedContext {
    pub query_terms: TokenSeq,
    /// Output tokens blended into the score; empty for plain retrieval.
    pub output_terms: TokenSeq,
    pub w_y: f64,
    pub k: usize,
    pub passages: Vec<Passage>,
}

impl RetrievedContext {
    pub fn empty(query_terms: TokenSeq, k: usize) -> Self {
        Self { query_terms, output_terms: Vec::new(), w_y: 0.0, k, passages: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.passages.iter().flat_map(|p| p.sentences.iter())
    }
}

/// Anything that can serve the loop's two retrieval calls.
pub trait Retriever {
    fn retrieve(&self, x: &[String], k: usize) -> RetrievedContext;
    fn retrieve_joint(&self, x: &[String], y: &[String], w_y: f64, k: usize) -> RetrievedContext;
}

fn idf(doc_count: usize, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// Unique query terms in a fixed (lexicographic) order so every scoring path
/// accumulates in the same order and produces bit-identical sums.
fn unique_terms(query: &[String]) -> BTreeSet<&str> {
    query.iter().map(String::as_str).collect()
}

impl Index {
    pub fn build(corpus: Corpus) -> Result<Self, RetrievalError> {
        Self::build_with(corpus, Bm25Params::default())
    }

    pub fn build_with(corpus: Corpus, params: Bm25Params) -> Result<Self, RetrievalError> {
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (i, d) in corpus.docs().iter().enumerate() {
            doc_lengths.push(d.tokens.len());
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &d.tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, tf) in tf {
                postings.entry(term.to_owned()).or_default().push(Posting { doc: i as u32, tf });
            }
        }
        let total: usize = doc_lengths.iter().sum();
        if total == 0 {
            return Err(RetrievalError::NoTokens);
        }
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        Ok(Self { corpus, postings, doc_lengths, avg_doc_length, params })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn set_params(&mut self, params: Bm25Params) {
        self.params = params;
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<usize> {
        self.corpus.position(doc_id).map(|i| self.doc_lengths[i])
    }

    /// `(doc_id, tf)` pairs for a term, in corpus order.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|ps| ps.iter().map(|p| (self.corpus.docs()[p.doc as usize].id(), p.tf)).collect())
            .unwrap_or_default()
    }

    fn term_weight(&self, df: usize, tf: u32, doc_len: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * doc_len as f64 / self.avg_doc_length;
        idf(self.doc_count(), df) * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 score of one document. Repeated query terms count once.
    pub fn bm25_score(&self, query: &[String], doc_id: &str) -> Result<f64, RetrievalError> {
        let doc = self.corpus.position(doc_id).ok_or_else(|| RetrievalError::UnknownDoc(doc_id.to_owned()))?;
        let mut score = 0.0;
        for term in unique_terms(query) {
            let Some(ps) = self.postings.get(term) else {
                continue;
            };
            if let Some(p) = ps.iter().find(|p| p.doc as usize == doc) {
                score += self.term_weight(ps.len(), p.tf, self.doc_lengths[doc]);
            }
        }
        Ok(score)
    }

    /// Scores for every document, accumulated term by term over postings.
    fn score_all(&self, query: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_count()];
        for term in unique_terms(query) {
            if let Some(ps) = self.postings.get(term) {
                for p in ps {
                    let d = p.doc as usize;
                    scores[d] += self.term_weight(ps.len(), p.tf, self.doc_lengths[d]);
                }
            }
        }
        scores
    }

    fn rank(&self, scores: Vec<f64>, k: usize) -> Vec<Passage> {
        let docs = self.corpus.docs();
        let mut hits: Vec<(usize, f64)> = scores.into_iter().enumerate().filter(|&(_, s)| s > 0.0).collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| docs[a.0].id().cmp(docs[b.0].id())));
        hits.truncate(k);
        hits.into_iter()
            .map(|(i, score)| Passage { doc_id: docs[i].id().to_owned(), score, sentences: docs[i].sentences.clone() })
            .collect()
    }

    /// Top-`k` documents by BM25, ties broken by ascending id. Documents
    /// scoring zero are never returned.
    pub fn retrieve(&self, x: &[String], k: usize) -> RetrievedContext {
        let mut ctx = RetrievedContext::empty(x.to_vec(), k);
        ctx.passages = self.rank(self.score_all(x), k);
        ctx
    }

    /// Ranks by `bm25(x) + w_y * bm25(y)`.
    pub fn retrieve_joint(&self, x: &[String], y: &[String], w_y: f64, k: usize) -> RetrievedContext {
        let sx = self.score_all(x);
        let sy = self.score_all(y);
        let blended = sx.iter().zip(&sy).map(|(a, b)| a + w_y * b).collect();
        RetrievedContext { query_terms: x.to_vec(), output_terms: y.to_vec(), w_y, k, passages: self.rank(blended, k) }
    }
}

impl Retriever for Index {
    fn retrieve(&self, x: &[String], k: usize) -> RetrievedContext {
        Index::retrieve(self, x, k)
    }

    fn retrieve_joint(&self, x: &[String], y: &[String], w_y: f64, k: usize) -> RetrievedContext {
        Index::retrieve_joint(self, x, y, w_y, k)
    }
}

// On-disk layout: postings.json, stats.json, docs.jsonl.

const POSTINGS_FILE: &str = "postings.json";
const STATS_FILE: &str = "stats.json";
const DOCS_FILE: &str = "docs.jsonl";

#[derive(Serialize, Deserialize)]
struct Stats {
    doc_lengths: BTreeMap<String, usize>,
    doc_count: usize,
    avg_doc_length: f64,
}

impl Index {
    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        let io = |path: &Path| {
            let path = path.to_owned();
            move |source| RetrievalError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;

        let docs = self.corpus.docs();
        let postings: BTreeMap<&str, Vec<(&str, u32)>> = self
            .postings
            .iter()
            .map(|(term, ps)| {
                let list = ps.iter().map(|p| (docs[p.doc as usize].id(), p.tf)).collect();
                (term.as_str(), list)
            })
            .collect();
        let stats = Stats {
            doc_lengths: docs.iter().zip(&self.doc_lengths).map(|(d, &len)| (d.id().to_owned(), len)).collect(),
            doc_count: self.doc_count(),
            avg_doc_length: self.avg_doc_length,
        };

        let p = dir.join(POSTINGS_FILE);
        fs::write(&p, serde_json::to_vec(&postings).expect("postings serialize")).map_err(io(&p))?;
        let p = dir.join(STATS_FILE);
        fs::write(&p, serde_json::to_vec_pretty(&stats).expect("stats serialize")).map_err(io(&p))?;
        let p = dir.join(DOCS_FILE);
        self.corpus.write(&p).map_err(io(&p))?;
        Ok(())
    }

    /// Loads a persisted index and checks the stored postings and statistics
    /// against the stored corpus.
    pub fn load(dir: &Path) -> Result<Self, RetrievalError> {
        Self::load_with(dir, Bm25Params::default())
    }

    pub fn load_with(dir: &Path, params: Bm25Params) -> Result<Self, RetrievalError> {
        fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RetrievalError> {
            let bytes = fs::read(path).map_err(|source| RetrievalError::Io { path: path.to_owned(), source })?;
            serde_json::from_slice(&bytes)
                .map_err(|e| RetrievalError::Invalid { path: path.to_owned(), reason: e.to_string() })
        }

        let corpus = corpus::ingest(&dir.join(DOCS_FILE))?;
        let stats_path = dir.join(STATS_FILE);
        let stats: Stats = read_json(&stats_path)?;
        let postings_path = dir.join(POSTINGS_FILE);
        let stored: BTreeMap<String, Vec<(String, u32)>> = read_json(&postings_path)?;

        let invalid = |path: &Path, reason: String| RetrievalError::Invalid { path: path.to_owned(), reason };
        if stats.doc_count != corpus.len() || stats.doc_lengths.len() != corpus.len() {
            return Err(invalid(&stats_path, "document count does not match docs.jsonl".into()));
        }
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::with_capacity(stored.len());
        for (term, list) in stored {
            let mut ps = Vec::with_capacity(list.len());
            for (doc_id, tf) in list {
                let doc = corpus
                    .position(&doc_id)
                    .ok_or_else(|| invalid(&postings_path, format!("unknown document {doc_id:?}")))?;
                ps.push(Posting { doc: doc as u32, tf });
            }
            postings.insert(term, ps);
        }
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for d in corpus.docs() {
            let len = *stats
                .doc_lengths
                .get(d.id())
                .ok_or_else(|| invalid(&stats_path, format!("missing length for {:?}", d.id())))?;
            doc_lengths.push(len);
        }

        let index = Self { corpus, postings, doc_lengths, avg_doc_length: stats.avg_doc_length, params };
        let rebuilt = Self::build_with(index.corpus.clone(), params)?;
        if !index.same_structure(&rebuilt) {
            return Err(invalid(dir, "stored postings disagree with docs.jsonl".into()));
        }
        Ok(index)
    }

    fn same_structure(&self, other: &Self) -> bool {
        self.postings == other.postings
            && self.doc_lengths == other.doc_lengths
            && (self.avg_doc_length - other.avg_doc_length).abs() <= 1e-12 * other.avg_doc_length
    }
}
