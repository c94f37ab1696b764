//! Iterative retrieval-augmented generation.
//!
//! An initial answer is generated from the query, grounding passages are
//! retrieved with BM25, and the answer is refined repeatedly while retrieval
//! is re-run against the query and the evolving answer. The crate also ships
//! a tabular toy policy trained with REINFORCE and the BLEU/ROUGE/perplexity
//! metrics used to evaluate runs.

pub mod corpus;
pub mod generator;
pub mod metrics;
pub mod refine_loop;
pub mod retrieval;
pub mod rl;

pub use corpus::{ingest, tokenize, Corpus, Document, Sentence, TokenSeq};
pub use generator::{AnyGenerator, Backend, GenerationResult, Generator, GeneratorConfig};
pub use metrics::{EvalPair, MetricsReport};
pub use refine_loop::{run_loop, LoopConfig, LoopTranscript, StopReason};
pub use retrieval::{Index, RetrievedContext, Retriever};
pub use rl::policy::PolicyParams;

/// Derives an independent stream seed from a base seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
