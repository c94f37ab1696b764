//! Tabular categorical policy over a fixed vocabulary.
//!
//! Each row of logits is selected by the previous token (or `START`) and a
//! flag telling whether the retrieved context is non-empty.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const START: &str = "START";

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy vocabulary is empty")]
    EmptyVocab,
    #[error("invalid vocabulary entry {0:?}")]
    BadToken(String),
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateToken(String),
    #[error("row {key}: expected {expected} finite logits, got {got:?}")]
    BadRow { key: String, expected: usize, got: Vec<f64> },
    #[error("missing row {0}")]
    MissingRow(String),
    #[error("unknown row key {0:?}")]
    UnknownRow(String),
    #[error("policy checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("policy checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Conditioning key for one row of the logit table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowKey {
    pub prev: Option<usize>,
    pub ctx: bool,
}

impl RowKey {
    pub fn start(ctx: bool) -> Self {
        Self { prev: None, ctx }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vec<String>,
    logits: Vec<f64>,
}

/// One sampled step of a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub row: usize,
    pub token: usize,
    pub logprob: f64,
}

impl PolicyParams {
    /// All-zero logits, i.e. uniform rows.
    pub fn uniform(vocab: Vec<String>) -> Result<Self, PolicyError> {
        check_vocab(&vocab)?;
        let n = vocab.len() * (vocab.len() + 1) * 2;
        Ok(Self { vocab, logits: vec![0.0; n] })
    }

    pub fn from_rows(vocab: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        let mut p = Self::uniform(vocab)?;
        if rows.len() != p.num_rows() {
            return Err(PolicyError::MissingRow(format!("expected {} rows, got {}", p.num_rows(), rows.len())));
        }
        for (r, row) in rows.into_iter().enumerate() {
            let key = p.key_string(p.row_key(r));
            p.set_row(r, &row, &key)?;
        }
        Ok(p)
    }

    fn set_row(&mut self, r: usize, row: &[f64], key: &str) -> Result<(), PolicyError> {
        let v = self.vocab_size();
        if row.len() != v || row.iter().any(|x| !x.is_finite()) {
            return Err(PolicyError::BadRow { key: key.to_owned(), expected: v, got: row.to_vec() });
        }
        self.logits[r * v..(r + 1) * v].copy_from_slice(row);
        Ok(())
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_rows(&self) -> usize {
        (self.vocab.len() + 1) * 2
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.vocab.iter().position(|t| t == token)
    }

    pub fn row_index(&self, key: RowKey) -> usize {
        let slot = key.prev.map_or(0, |p| p + 1);
        slot * 2 + usize::from(key.ctx)
    }

    pub fn row_key(&self, row: usize) -> RowKey {
        let slot = row / 2;
        RowKey { prev: slot.checked_sub(1), ctx: row % 2 == 1 }
    }

    pub fn key_string(&self, key: RowKey) -> String {
        let prev = key.prev.map_or(START, |p| self.vocab[p].as_str());
        format!("prev={prev},ctx={}", u8::from(key.ctx))
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let v = self.vocab_size();
        &self.logits[row * v..(row + 1) * v]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let v = self.vocab_size();
        &mut self.logits[row * v..(row + 1) * v]
    }

    /// Flat logit table, row-major.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn probs(&self, row: usize, temperature: f64) -> Vec<f64> {
        softmax(self.row(row), temperature)
    }

    /// Draws one token from `row` with the Gumbel-max trick: one uniform per
    /// vocabulary entry, `argmax(logit / T + gumbel)`. Under a shared seed a
    /// perturbed policy only changes the sample where the perturbed logit
    /// wins or stops winning, which keeps finite differences well coupled.
    pub fn sample_step<R: Rng + ?Sized>(&self, row: usize, temperature: f64, rng: &mut R) -> Step {
        let lp = log_softmax(self.row(row), temperature);
        let mut token = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, l) in lp.iter().enumerate() {
            // u in (0, 1] keeps both logarithms finite
            let u = 1.0 - rng.gen::<f64>();
            let key = l - (-u.ln()).ln();
            if key > best {
                best = key;
                token = i;
            }
        }
        Step { row, token, logprob: lp[token] }
    }

    /// Autoregressive rollout of exactly `max_tokens` steps.
    pub fn rollout<R: Rng + ?Sized>(&self, ctx: bool, max_tokens: usize, temperature: f64, rng: &mut R) -> Vec<Step> {
        let mut key = RowKey::start(ctx);
        let mut steps = Vec::with_capacity(max_tokens);
        for _ in 0..max_tokens {
            let step = self.sample_step(self.row_index(key), temperature, rng);
            key.prev = Some(step.token);
            steps.push(step);
        }
        steps
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self.checkpoint()).expect("checkpoint serializes")
    }

    fn checkpoint(&self) -> Checkpoint {
        let logits = (0..self.num_rows()).map(|r| (self.key_string(self.row_key(r)), self.row(r).to_vec())).collect();
        Checkpoint { vocab: self.vocab.clone(), logits }
    }

    pub fn from_json(value: Value) -> Result<Self, PolicyError> {
        let ck: Checkpoint = serde_json::from_value(value)?;
        let mut p = Self::uniform(ck.vocab)?;
        let mut seen = vec![false; p.num_rows()];
        for (key, row) in &ck.logits {
            let r = (0..p.num_rows())
                .find(|&r| p.key_string(p.row_key(r)) == *key)
                .ok_or_else(|| PolicyError::UnknownRow(key.clone()))?;
            p.set_row(r, row, key)?;
            seen[r] = true;
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(PolicyError::MissingRow(p.key_string(p.row_key(r))));
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_json(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut bytes = serde_json::to_vec_pretty(&self.checkpoint())?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    vocab: Vec<String>,
    logits: BTreeMap<String, Vec<f64>>,
}

fn check_vocab(vocab: &[String]) -> Result<(), PolicyError> {
    if vocab.is_empty() {
        return Err(PolicyError::EmptyVocab);
    }
    for (i, t) in vocab.iter().enumerate() {
        // `START` and separators would make checkpoint keys ambiguous.
        if t.is_empty() || t == START || t.contains(',') || t.contains('=') {
            return Err(PolicyError::BadToken(t.clone()));
        }
        if vocab[..i].contains(t) {
            return Err(PolicyError::DuplicateToken(t.clone()));
        }
    }
    Ok(())
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(logits, temperature).into_iter().map(f64::exp).collect()
}
