//! Generation backends behind one contract: produce an initial answer from the
//! query, and a refined answer from the query, the previous answer and the
//! retrieved context.
//!
//! * `stub` is a deterministic extractive generator that composes answers
//!   from retrieved sentences.
//! * `remote` speaks a small JSON protocol over HTTP POST.
//! * `toy-policy` samples from a tabular [`PolicyParams`].

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, TokenSeq};
use crate::retrieval::RetrievedContext;
use crate::rl::policy::PolicyParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Stub,
    Remote,
    ToyPolicy,
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stub" => Ok(Backend::Stub),
            "remote" => Ok(Backend::Remote),
            "toy-policy" => Ok(Backend::ToyPolicy),
            other => Err(format!("unknown backend {other:?} (expected stub, remote or toy-policy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub backend: Backend,
    pub max_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_sentences: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    /// Policy checkpoint for the toy-policy backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_path: Option<PathBuf>,
}

impl GeneratorConfig {
    pub fn stub(max_tokens: usize, top_sentences: usize) -> Self {
        Self {
            backend: Backend::Stub,
            max_tokens,
            temperature: None,
            top_sentences: Some(top_sentences),
            endpoint_url: None,
            policy_path: None,
        }
    }

    pub fn remote(endpoint_url: impl Into<String>, max_tokens: usize, temperature: f64) -> Self {
        Self {
            backend: Backend::Remote,
            max_tokens,
            temperature: Some(temperature),
            top_sentences: None,
            endpoint_url: Some(endpoint_url.into()),
            policy_path: None,
        }
    }

    pub fn toy_policy(max_tokens: usize, temperature: f64) -> Self {
        Self {
            backend: Backend::ToyPolicy,
            max_tokens,
            temperature: Some(temperature),
            top_sentences: None,
            endpoint_url: None,
            policy_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |msg: &str| Err(GenError::Config(msg.to_owned()));
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        let temperature_ok = matches!(self.temperature, Some(t) if t > 0.0 && t.is_finite());
        match self.backend {
            Backend::Stub => match self.top_sentences {
                Some(n) if n >= 1 => Ok(()),
                _ => bad("stub backend requires top_sentences >= 1"),
            },
            Backend::Remote => {
                if self.endpoint_url.as_deref().is_none_or(str::is_empty) {
                    bad("remote backend requires endpoint_url")
                } else if !temperature_ok {
                    bad("remote backend requires temperature > 0")
                } else {
                    Ok(())
                }
            }
            Backend::ToyPolicy if !temperature_ok => bad("toy-policy backend requires temperature > 0"),
            Backend::ToyPolicy => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("request to {endpoint} failed: {source}")]
    Transport {
        endpoint: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("{endpoint} returned status {status}: {body}")]
    Status { endpoint: String, status: u16, body: String },
    #[error("malformed response from {endpoint}: {cause}")]
    Malformed { endpoint: String, cause: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationStep {
    pub token: String,
    pub logprob: Option<f64>,
}

/// Generated output. Either every step carries a log-probability or none does,
/// and `text` is always the space-join of the step tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    steps: Vec<GenerationStep>,
    text: String,
}

impl GenerationResult {
    pub fn without_logprobs(tokens: impl IntoIterator<Item = String>) -> Self {
        Self::from_steps(tokens.into_iter().map(|token| GenerationStep { token, logprob: None }).collect())
    }

    /// Panics if any log-probability is positive or NaN.
    pub fn with_logprobs(steps: impl IntoIterator<Item = (String, f64)>) -> Self {
        Self::from_steps(
            steps
                .into_iter()
                .map(|(token, lp)| {
                    assert!(lp <= 0.0, "log-probability {lp} for {token:?} must be <= 0");
                    GenerationStep { token, logprob: Some(lp) }
                })
                .collect(),
        )
    }

    fn from_steps(steps: Vec<GenerationStep>) -> Self {
        let text = steps.iter().map(|s| s.token.as_str()).collect::<Vec<_>>().join(" ");
        Self { steps, text }
    }

    pub fn steps(&self) -> &[GenerationStep] {
        &self.steps
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.token.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Per-step log-probabilities, if the backend reported them.
    pub fn logprobs(&self) -> Option<Vec<f64>> {
        self.steps.iter().map(|s| s.logprob).collect()
    }

    /// Sum of per-step log-probabilities; `Some(0.0)` for an empty result.
    pub fn sequence_logprob(&self) -> Option<f64> {
        self.logprobs().map(|lps| lps.iter().sum())
    }
}

impl Serialize for GenerationResult {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            text: &'a str,
            tokens: Vec<&'a str>,
            logprobs: Option<Vec<f64>>,
        }
        Repr {
            text: &self.text,
            tokens: self.steps.iter().map(|s| s.token.as_str()).collect(),
            logprobs: self.logprobs(),
        }
        .serialize(serializer)
    }
}

pub trait Generator {
    fn generate_initial(&self, x: &[String], seed: u64) -> Result<GenerationResult, GenError>;

    fn refine(
        &self,
        x: &[String],
        y_prev: &GenerationResult,
        context: &RetrievedContext,
        seed: u64,
    ) -> Result<GenerationResult, GenError>;
}

/// Deterministic extractive generator.
#[derive(Debug, Clone)]
pub struct StubGenerator {
    pub max_tokens: usize,
    pub top_sentences: usize,
}

impl StubGenerator {
    /// Picks the best sentences by `|s ∩ x| + 0.5 |s ∩ y_prev|` over unique
    /// tokens, ordered by score, then doc id, then sentence index.
    pub fn select<'c>(&self, x: &[String], y_prev: &[String], context: &'c RetrievedContext) -> Vec<&'c Sentence> {
        let xs: HashSet<&str> = x.iter().map(String::as_str).collect();
        let ys: HashSet<&str> = y_prev.iter().map(String::as_str).collect();
        let mut scored: Vec<(f64, &Sentence)> = context
            .sentences()
            .map(|s| {
                let uniq: HashSet<&str> = s.tokens.iter().map(String::as_str).collect();
                let in_x = uniq.iter().filter(|t| xs.contains(*t)).count();
                let in_y = uniq.iter().filter(|t| ys.contains(*t)).count();
                (in_x as f64 + 0.5 * in_y as f64, s)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| a.1.doc_id.cmp(&b.1.doc_id)).then_with(|| a.1.index.cmp(&b.1.index))
        });
        scored.into_iter().take(self.top_sentences).map(|(_, s)| s).collect()
    }
}

impl Generator for StubGenerator {
    fn generate_initial(&self, x: &[String], _seed: u64) -> Result<GenerationResult, GenError> {
        Ok(GenerationResult::without_logprobs(x.iter().take(self.max_tokens).cloned()))
    }

    fn refine(
        &self,
        x: &[String],
        y_prev: &GenerationResult,
        context: &RetrievedContext,
        _seed: u64,
    ) -> Result<GenerationResult, GenError> {
        if context.is_empty() {
            return Ok(y_prev.clone());
        }
        let chosen = self.select(x, &y_prev.tokens(), context);
        Ok(GenerationResult::without_logprobs(
            chosen.into_iter().flat_map(|s| s.tokens.iter().cloned()).take(self.max_tokens),
        ))
    }
}

/// Prompt for the first answer.
pub fn initial_prompt(x: &[String]) -> String {
    format!("Question:\n{}\n\nRewrite the answer using only information supported by the passages.", x.join(" "))
}

/// Prompt for a refinement step. Passages are numbered from 1 in rank order.
pub fn refine_prompt(x: &[String], y_prev: &GenerationResult, context: &RetrievedContext) -> String {
    let passages =
        context.sentences().enumerate().map(|(i, s)| format!("[{}] {}", i + 1, s.text)).collect::<Vec<_>>().join("\n");
    format!(
        "Question:\n{}\n\nPrevious answer:\n{}\n\nRetrieved passages:\n{}\n\nRewrite the answer using only information supported by the passages.",
        x.join(" "),
        y_prev.text(),
        passages
    )
}

#[derive(Debug, Serialize)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub max_tokens: usize,
    pub temperature: f64,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    tokens: Vec<ResponseToken>,
}

#[derive(Debug, Deserialize)]
struct ResponseToken {
    text: String,
    logprob: Option<f64>,
}

/// HTTP client for the completion protocol: POST
/// `{"prompt","max_tokens","temperature"}`, receive `{"tokens":[{"text","logprob"}]}`.
#[derive(Debug, Clone)]
pub struct RemoteGenerator {
    client: reqwest::blocking::Client,
    endpoint: String,
    max_tokens: usize,
    temperature: f64,
}

impl RemoteGenerator {
    pub fn new(endpoint: impl Into<String>, max_tokens: usize, temperature: f64) -> Result<Self, GenError> {
        let endpoint = endpoint.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|source| GenError::Transport { endpoint: endpoint.clone(), source })?;
        Ok(Self { client, endpoint, max_tokens, temperature })
    }

    /// Serialized request body. Identical inputs give identical bytes.
    pub fn request_body(&self, prompt: &str) -> Vec<u8> {
        serde_json::to_vec(&CompletionRequest { prompt, max_tokens: self.max_tokens, temperature: self.temperature })
            .expect("request serializes")
    }

    pub fn complete(&self, prompt: &str) -> Result<GenerationResult, GenError> {
        let endpoint = &self.endpoint;
        let resp = self
            .client
            .post(endpoint)
            .header("content-type", "application/json")
            .body(self.request_body(prompt))
            .send()
            .map_err(|source| GenError::Transport { endpoint: endpoint.clone(), source })?;
        let status = resp.status();
        let body = resp.bytes().map_err(|source| GenError::Transport { endpoint: endpoint.clone(), source })?;
        if !status.is_success() {
            return Err(GenError::Status {
                endpoint: endpoint.clone(),
                status: status.as_u16(),
                body: String::from_utf8_lossy(&body).into_owned(),
            });
        }
        parse_completion(&body).map_err(|cause| GenError::Malformed { endpoint: endpoint.clone(), cause })
    }
}

/// Decodes a completion response. A single null log-probability makes the
/// whole result report none.
pub fn parse_completion(body: &[u8]) -> Result<GenerationResult, String> {
    let resp: CompletionResponse = serde_json::from_slice(body).map_err(|e| e.to_string())?;
    if let Some(t) = resp.tokens.iter().find(|t| t.logprob.is_some_and(|lp| lp.is_nan() || lp > 0.0)) {
        return Err(format!("token {:?} has invalid logprob {:?}", t.text, t.logprob));
    }
    if resp.tokens.iter().all(|t| t.logprob.is_some()) {
        Ok(GenerationResult::with_logprobs(resp.tokens.into_iter().map(|t| (t.text, t.logprob.unwrap()))))
    } else {
        Ok(GenerationResult::without_logprobs(resp.tokens.into_iter().map(|t| t.text)))
    }
}

impl Generator for RemoteGenerator {
    fn generate_initial(&self, x: &[String], _seed: u64) -> Result<GenerationResult, GenError> {
        self.complete(&initial_prompt(x))
    }

    fn refine(
        &self,
        x: &[String],
        y_prev: &GenerationResult,
        context: &RetrievedContext,
        _seed: u64,
    ) -> Result<GenerationResult, GenError> {
        self.complete(&refine_prompt(x, y_prev, context))
    }
}

/// Samples from a tabular policy. Rows are conditioned on the previous token
/// and on whether the supplied context is non-empty; the query is ignored.
#[derive(Debug, Clone)]
pub struct ToyPolicyGenerator {
    pub policy: PolicyParams,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl ToyPolicyGenerator {
    pub fn sample(&self, ctx: bool, seed: u64) -> GenerationResult {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = self.policy.rollout(ctx, self.max_tokens, self.temperature, &mut rng);
        GenerationResult::with_logprobs(steps.into_iter().map(|s| (self.policy.vocab()[s.token].clone(), s.logprob)))
    }
}

impl Generator for ToyPolicyGenerator {
    fn generate_initial(&self, _x: &[String], seed: u64) -> Result<GenerationResult, GenError> {
        Ok(self.sample(false, seed))
    }

    fn refine(
        &self,
        _x: &[String],
        _y_prev: &GenerationResult,
        context: &RetrievedContext,
        seed: u64,
    ) -> Result<GenerationResult, GenError> {
        Ok(self.sample(!context.is_empty(), seed))
    }
}

/// A generator selected at runtime from a [`GeneratorConfig`].
#[derive(Debug, Clone)]
pub enum AnyGenerator {
    Stub(StubGenerator),
    Remote(RemoteGenerator),
    ToyPolicy(ToyPolicyGenerator),
}

impl AnyGenerator {
    /// `policy` is required for the toy-policy backend and ignored otherwise.
    pub fn from_config(cfg: &GeneratorConfig, policy: Option<PolicyParams>) -> Result<Self, GenError> {
        cfg.validate()?;
        Ok(match cfg.backend {
            Backend::Stub => AnyGenerator::Stub(StubGenerator {
                max_tokens: cfg.max_tokens,
                top_sentences: cfg.top_sentences.unwrap_or(1),
            }),
            Backend::Remote => AnyGenerator::Remote(RemoteGenerator::new(
                cfg.endpoint_url.clone().unwrap_or_default(),
                cfg.max_tokens,
                cfg.temperature.unwrap_or(1.0),
            )?),
            Backend::ToyPolicy => AnyGenerator::ToyPolicy(ToyPolicyGenerator {
                policy: policy.ok_or_else(|| GenError::Config("toy-policy backend requires a policy".into()))?,
                max_tokens: cfg.max_tokens,
                temperature: cfg.temperature.unwrap_or(1.0),
            }),
        })
    }

    fn inner(&self) -> &dyn Generator {
        match self {
            AnyGenerator::Stub(g) => g,
            AnyGenerator::Remote(g) => g,
            AnyGenerator::ToyPolicy(g) => g,
        }
    }
}

impl Generator for AnyGenerator {
    fn generate_initial(&self, x: &[String], seed: u64) -> Result<GenerationResult, GenError> {
        self.inner().generate_initial(x, seed)
    }

    fn refine(
        &self,
        x: &[String],
        y_prev: &GenerationResult,
        context: &RetrievedContext,
        seed: u64,
    ) -> Result<GenerationResult, GenError> {
        self.inner().refine(x, y_prev, context, seed)
    }
}

/// Convenience for callers holding plain token sequences.
pub fn tokens_to_result(tokens: &TokenSeq) -> GenerationResult {
    GenerationResult::without_logprobs(tokens.iter().cloned())
}
