//! The iterative refinement controller.
//!
//! ```text
//! y   <- generate_initial(x)
//! C   <- retrieve(x)
//! for t in 1..=T:
//!     y_t <- refine(x, y_{t-1}, C)
//!     stop if distance(y_{t-1}, y_t) <= epsilon
//!     C   <- retrieve_joint(x, y_t)
//! ```
//!
//! Iteration `t` always consumes the context retrieved before it. Every
//! iterate and its context are kept in the [`LoopTranscript`].

use serde::{Deserialize, Serialize, Serializer};

use crate::corpus::{tokenize, TokenSeq};
use crate::derive_seed;
use crate::generator::{GenError, GenerationResult, Generator};
use crate::retrieval::{RetrievedContext, Retriever};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub max_iters: usize,
    pub epsilon: f64,
    pub k: usize,
    pub w_y: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { max_iters: 3, epsilon: 0.02, k: 5, w_y: 0.5 }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.w_y) {
            return Err(format!("w_y {} outside [0, 1]", self.w_y));
        }
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Converged,
    TZero,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub t: usize,
    pub output: GenerationResult,
    #[serde(serialize_with = "serialize_context")]
    pub context: RetrievedContext,
    #[serde(rename = "distance")]
    pub distance_from_prev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopTranscript {
    pub query: String,
    pub query_tokens: TokenSeq,
    pub initial: GenerationResult,
    #[serde(serialize_with = "serialize_context")]
    pub initial_context: RetrievedContext,
    pub iterations: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    #[serde(rename = "final")]
    pub final_output: GenerationResult,
}

/// What was produced before a generator failure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartialTranscript {
    pub query: String,
    pub query_tokens: TokenSeq,
    pub initial: Option<GenerationResult>,
    #[serde(serialize_with = "serialize_opt_context")]
    pub initial_context: Option<RetrievedContext>,
    pub iterations: Vec<IterationRecord>,
    pub failed_at: usize,
    pub error: String,
}

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error("generation failed at iteration {iteration}: {source}")]
    Generation {
        /// 0 for the initial generation.
        iteration: usize,
        #[source]
        source: GenError,
        partial: Box<PartialTranscript>,
    },
}

#[derive(Serialize)]
struct PassageRecord<'a> {
    doc_id: &'a str,
    score: f64,
    sentence_indexes: Vec<usize>,
}

fn serialize_context<S: Serializer>(ctx: &RetrievedContext, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(ctx.passages.iter().map(|p| PassageRecord {
        doc_id: &p.doc_id,
        score: p.score,
        sentence_indexes: p.sentences.iter().map(|s| s.index).collect(),
    }))
}

fn serialize_opt_context<S: Serializer>(ctx: &Option<RetrievedContext>, s: S) -> Result<S::Ok, S::Error> {
    match ctx {
        Some(c) => serialize_context(c, s),
        None => s.serialize_none(),
    }
}

/// Token-level Levenshtein distance normalised by the longer length.
pub fn convergence_distance(a: &GenerationResult, b: &GenerationResult) -> f64 {
    let (a, b) = (a.steps(), b.steps());
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x.token != y.token);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()] as f64 / longest as f64
}

/// Runs the loop on raw query text. Generator seeds are derived from `seed`
/// and the iteration number (0 for the initial generation).
pub fn run_loop<G, R>(
    query: &str,
    retriever: &R,
    generator: &G,
    cfg: &LoopConfig,
    seed: u64,
) -> Result<LoopTranscript, LoopError>
where
    G: Generator + ?Sized,
    R: Retriever + ?Sized,
{
    cfg.validate().map_err(LoopError::Config)?;
    let x = tokenize(query);
    let fail = |iteration, source, initial, initial_context, iterations| {
        let error = format!("{source}");
        LoopError::Generation {
            iteration,
            source,
            partial: Box::new(PartialTranscript {
                query: query.to_owned(),
                query_tokens: x.clone(),
                initial,
                initial_context,
                iterations,
                failed_at: iteration,
                error,
            }),
        }
    };

    let initial = match generator.generate_initial(&x, derive_seed(seed, 0)) {
        Ok(y) => y,
        Err(e) => return Err(fail(0, e, None, None, Vec::new())),
    };
    let initial_context = retriever.retrieve(&x, cfg.k);

    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut stop_reason = if cfg.max_iters == 0 { StopReason::TZero } else { StopReason::MaxIters };
    let mut context = initial_context.clone();
    for t in 1..=cfg.max_iters {
        let prev = iterations.last().map_or(&initial, |r| &r.output);
        let output = match generator.refine(&x, prev, &context, derive_seed(seed, t as u64)) {
            Ok(y) => y,
            Err(e) => return Err(fail(t, e, Some(initial), Some(initial_context), iterations)),
        };
        let distance = convergence_distance(prev, &output);
        let next_context =
            (distance > cfg.epsilon).then(|| retriever.retrieve_joint(&x, &output.tokens(), cfg.w_y, cfg.k));
        iterations.push(IterationRecord { t, output, context, distance_from_prev: distance });
        match next_context {
            Some(c) => context = c,
            None => {
                stop_reason = StopReason::Converged;
                break;
            }
        }
    }

    let final_output = iterations.last().map_or(&initial, |r| &r.output).clone();
    Ok(LoopTranscript {
        query: query.to_owned(),
        query_tokens: x,
        initial,
        initial_context,
        iterations,
        stop_reason,
        final_output,
    })
}
