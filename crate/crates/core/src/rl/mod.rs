//! Reward functions, the REINFORCE score-function gradient for the toy
//! policy, a finite-difference cross-check, and plain gradient-ascent
//! training.
//!
//! The objective is the expected total reward of a `max_tokens` rollout.
//! Each sampled step contributes `G_t * (onehot(y_t) - softmax(row))` to the
//! row it was drawn from, where `G_t` is the reward collected from step `t`
//! to the end of the rollout.

pub mod policy;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Document, IngestedDoc, TokenSeq};
use crate::derive_seed;
use crate::metrics::{rouge, EvalPair};
use crate::retrieval::{Passage, RetrievedContext};
use policy::{softmax, PolicyError, PolicyParams, Step};

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("terminal-rouge reward requires a non-empty reference")]
    MissingReference,
    #[error("non-finite gradient at training step {step}")]
    NonFinite { step: usize },
    #[error("invalid argument: {0}")]
    BadArg(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("task file {path}: {reason}")]
    Task { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    TerminalRouge,
    GroundingOverlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference: TokenSeq,
    /// Constant added to every step's reward.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub offset: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl RewardSpec {
    pub fn grounding_overlap() -> Self {
        Self { kind: RewardKind::GroundingOverlap, reference: Vec::new(), offset: 0.0 }
    }

    pub fn terminal_rouge(reference: TokenSeq) -> Self {
        Self { kind: RewardKind::TerminalRouge, reference, offset: 0.0 }
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn validate(&self) -> Result<(), RlError> {
        if !self.offset.is_finite() {
            return Err(RlError::BadArg(format!("reward offset {} is not finite", self.offset)));
        }
        if self.kind == RewardKind::TerminalRouge && self.reference.is_empty() {
            return Err(RlError::MissingReference);
        }
        Ok(())
    }
}

/// A reward spec bound to one retrieved context.
#[derive(Debug, Clone)]
pub struct RewardModel {
    form: RewardForm,
    offset: f64,
}

#[derive(Debug, Clone)]
enum RewardForm {
    GroundingOverlap(HashSet<String>),
    TerminalRouge(TokenSeq),
}

impl RewardModel {
    pub fn new(spec: &RewardSpec, context: &RetrievedContext) -> Result<Self, RlError> {
        spec.validate()?;
        let form = match spec.kind {
            RewardKind::GroundingOverlap => {
                RewardForm::GroundingOverlap(context.sentences().flat_map(|s| s.tokens.iter().cloned()).collect())
            }
            RewardKind::TerminalRouge => RewardForm::TerminalRouge(spec.reference.clone()),
        };
        Ok(Self { form, offset: spec.offset })
    }

    pub fn step_reward(&self, y_t: &str, y_prefix: &[String], is_final: bool) -> f64 {
        let base = match &self.form {
            RewardForm::GroundingOverlap(vocab) => f64::from(u8::from(vocab.contains(y_t))),
            RewardForm::TerminalRouge(_) if !is_final => 0.0,
            RewardForm::TerminalRouge(reference) => {
                let mut hyp = y_prefix.to_vec();
                hyp.push(y_t.to_owned());
                rouge(&[EvalPair::new(hyp, reference.clone())]).map(|(_, _, l)| l).unwrap_or(0.0)
            }
        };
        base + self.offset
    }
}

/// Reward for emitting `y_t` after `y_prefix`. `x` does not enter either
/// reward form but is part of the signature every reward shares.
pub fn reward(
    spec: &RewardSpec,
    y_t: &str,
    y_prefix: &[String],
    _x: &[String],
    context: &RetrievedContext,
    is_final: bool,
) -> Result<f64, RlError> {
    Ok(RewardModel::new(spec, context)?.step_reward(y_t, y_prefix, is_final))
}

/// Everything a rollout needs apart from the policy.
#[derive(Debug, Clone)]
pub struct Setup {
    pub x: TokenSeq,
    pub context: RetrievedContext,
    pub spec: RewardSpec,
    pub max_tokens: usize,
}

impl Setup {
    pub fn ctx_flag(&self) -> bool {
        !self.context.is_empty()
    }
}

struct Prepared<'a> {
    setup: &'a Setup,
    model: RewardModel,
}

impl<'a> Prepared<'a> {
    fn new(setup: &'a Setup) -> Result<Self, RlError> {
        if setup.max_tokens == 0 {
            return Err(RlError::BadArg("max_tokens must be at least 1".into()));
        }
        Ok(Self { setup, model: RewardModel::new(&setup.spec, &setup.context)? })
    }

    /// One seeded rollout and its per-step rewards.
    fn episode(&self, policy: &PolicyParams, seed: u64) -> (Vec<Step>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = policy.rollout(self.setup.ctx_flag(), self.setup.max_tokens, 1.0, &mut rng);
        let mut prefix: Vec<String> = Vec::with_capacity(steps.len());
        let mut rewards = Vec::with_capacity(steps.len());
        for (i, s) in steps.iter().enumerate() {
            let tok = &policy.vocab()[s.token];
            rewards.push(self.model.step_reward(tok, &prefix, i + 1 == steps.len()));
            prefix.push(tok.clone());
        }
        (steps, rewards)
    }

    /// Estimate of J: mean over seeded rollouts of the expected total
    /// reward, where each step's reward is averaged over that step's token
    /// distribution given the sampled prefix. Unbiased for the mean total
    /// reward, with the per-step sampling noise integrated out.
    fn expected_return(&self, policy: &PolicyParams, trials: usize, seed: u64) -> f64 {
        let mut total = 0.0;
        for e in 0..trials as u64 {
            let (steps, _) = self.episode(policy, derive_seed(seed, e));
            let mut prefix: Vec<String> = Vec::with_capacity(steps.len());
            for (i, s) in steps.iter().enumerate() {
                let is_final = i + 1 == steps.len();
                let probs = softmax(policy.row(s.row), 1.0);
                for (tok, p) in policy.vocab().iter().zip(&probs) {
                    total += p * self.model.step_reward(tok, &prefix, is_final);
                }
                prefix.push(policy.vocab()[s.token].clone());
            }
        }
        total / trials as f64
    }
}

/// `onehot(token) - softmax(row)`: the gradient of `log P(token)` with
/// respect to that row's logits.
pub fn score_row(policy: &PolicyParams, row: usize, token: usize) -> Vec<f64> {
    let mut g: Vec<f64> = softmax(policy.row(row), 1.0).into_iter().map(|p| -p).collect();
    g[token] += 1.0;
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    /// Same row-major layout as [`PolicyParams::logits`].
    pub grads: Vec<f64>,
    pub vocab_size: usize,
    pub episodes: usize,
    pub mean_reward: f64,
    /// Rows sampled from at least once.
    pub visited_rows: Vec<usize>,
}

impl GradEstimate {
    pub fn row(&self, row: usize) -> &[f64] {
        &self.grads[row * self.vocab_size..(row + 1) * self.vocab_size]
    }
}

/// Monte-Carlo score-function estimate of the gradient of expected total
/// reward. Episode `e` is seeded with `derive_seed(seed, e)`.
pub fn reinforce_gradient(
    policy: &PolicyParams,
    setup: &Setup,
    episodes: usize,
    seed: u64,
) -> Result<GradEstimate, RlError> {
    if episodes == 0 {
        return Err(RlError::BadArg("episodes must be at least 1".into()));
    }
    let prep = Prepared::new(setup)?;
    let v = policy.vocab_size();
    let mut grads = vec![0.0; policy.logits().len()];
    let mut visited = vec![false; policy.num_rows()];
    let mut total_reward = 0.0;
    for e in 0..episodes as u64 {
        let (steps, rewards) = prep.episode(policy, derive_seed(seed, e));
        total_reward += rewards.iter().sum::<f64>();
        let mut to_go = 0.0;
        for (step, r) in steps.iter().zip(&rewards).rev() {
            to_go += r;
            visited[step.row] = true;
            if to_go == 0.0 {
                continue;
            }
            let g = score_row(policy, step.row, step.token);
            for (acc, gi) in grads[step.row * v..(step.row + 1) * v].iter_mut().zip(g) {
                *acc += to_go * gi;
            }
        }
    }
    let n = episodes as f64;
    grads.iter_mut().for_each(|g| *g /= n);
    Ok(GradEstimate {
        grads,
        vocab_size: v,
        episodes,
        mean_reward: total_reward / n,
        visited_rows: (0..visited.len()).filter(|&r| visited[r]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdCoordinate {
    pub index: usize,
    pub finite_difference: f64,
    pub reinforce: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coordinates: Vec<FdCoordinate>,
}

#[derive(Debug, Clone, Copy)]
pub struct FdParams {
    pub h: f64,
    pub trials: usize,
    pub episodes: usize,
    /// How many coordinates to check; capped at the number of coordinates in
    /// rows reachable under the setup's context flag.
    pub coords: usize,
    pub seed: u64,
}

/// Central finite difference of the expected total reward at one coordinate,
/// using the same rollout seeds on both sides. Each side's J is estimated
/// with per-step expected rewards, so only the sampled prefixes carry noise.
pub fn finite_difference(
    policy: &PolicyParams,
    setup: &Setup,
    index: usize,
    h: f64,
    trials: usize,
    seed: u64,
) -> Result<f64, RlError> {
    if h.is_nan() || h <= 0.0 || trials == 0 {
        return Err(RlError::BadArg("need h > 0 and trials >= 1".into()));
    }
    let prep = Prepared::new(setup)?;
    let mut plus = policy.clone();
    plus.logits_mut()[index] += h;
    let mut minus = policy.clone();
    minus.logits_mut()[index] -= h;
    let jp = prep.expected_return(&plus, trials, seed);
    let jm = prep.expected_return(&minus, trials, seed);
    Ok((jp - jm) / (2.0 * h))
}

/// Compares REINFORCE against common-random-number finite differences on a
/// seeded sample of coordinates. Relative error uses the denominator
/// `max(|fd|, |rf|, 1e-8)`.
pub fn fd_check(policy: &PolicyParams, setup: &Setup, params: FdParams) -> Result<FdReport, RlError> {
    let rf = reinforce_gradient(policy, setup, params.episodes, params.seed)?;
    let v = policy.vocab_size();
    let ctx = setup.ctx_flag();
    let candidates: Vec<usize> =
        (0..policy.num_rows()).filter(|&r| policy.row_key(r).ctx == ctx).flat_map(|r| r * v..(r + 1) * v).collect();
    let amount = params.coords.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, u64::MAX));
    let mut picked: Vec<usize> =
        sample(&mut rng, candidates.len(), amount).into_iter().map(|i| candidates[i]).collect();
    picked.sort_unstable();

    let mut coordinates = Vec::with_capacity(picked.len());
    for index in picked {
        let fd = finite_difference(policy, setup, index, params.h, params.trials, params.seed)?;
        let r = rf.grads[index];
        let rel_error = (fd - r).abs() / fd.abs().max(r.abs()).max(1e-8);
        coordinates.push(FdCoordinate { index, finite_difference: fd, reinforce: r, rel_error });
    }
    let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(FdReport { max_rel_error, coordinates })
}

#[derive(Debug, Clone, Copy)]
pub struct TrainParams {
    pub steps: usize,
    pub lr: f64,
    pub episodes_per_step: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyParams,
    /// Mean episode reward at each step, measured before that step's update.
    pub reward_curve: Vec<f64>,
    pub visited_rows: Vec<usize>,
}

/// Plain gradient ascent `θ <- θ + lr * ĝ`.
pub fn train_toy(policy: &PolicyParams, setup: &Setup, params: TrainParams) -> Result<TrainOutcome, RlError> {
    if params.steps == 0 {
        return Err(RlError::BadArg("steps must be at least 1".into()));
    }
    if params.lr < 0.0 || !params.lr.is_finite() {
        return Err(RlError::BadArg(format!("learning rate {} must be finite and >= 0", params.lr)));
    }
    let mut theta = policy.clone();
    let mut curve = Vec::with_capacity(params.steps);
    let mut visited = vec![false; theta.num_rows()];
    for step in 0..params.steps {
        let est = reinforce_gradient(&theta, setup, params.episodes_per_step, derive_seed(params.seed, step as u64))?;
        if est.grads.iter().any(|g| !g.is_finite()) {
            return Err(RlError::NonFinite { step });
        }
        for (t, g) in theta.logits_mut().iter_mut().zip(&est.grads) {
            *t += params.lr * g;
        }
        if theta.logits().iter().any(|t| !t.is_finite()) {
            return Err(RlError::NonFinite { step });
        }
        for &r in &est.visited_rows {
            visited[r] = true;
        }
        curve.push(est.mean_reward);
    }
    Ok(TrainOutcome {
        policy: theta,
        reward_curve: curve,
        visited_rows: (0..visited.len()).filter(|&r| visited[r]).collect(),
    })
}

/// Means of consecutive non-overlapping windows; the last may be shorter.
pub fn window_means(curve: &[f64], window: usize) -> Vec<f64> {
    curve.chunks(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// Builds a context whose passages are the given texts, one passage each,
/// scored 1.0 and named `ctx0`, `ctx1`, ...
pub fn context_from_texts(texts: &[String], query: &[String]) -> RetrievedContext {
    let mut ctx = RetrievedContext::empty(query.to_vec(), texts.len().max(1));
    ctx.passages = texts
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.trim().is_empty())
        .map(|(i, t)| {
            let d = IngestedDoc::new(Document::new(format!("ctx{i}"), t.clone()));
            Passage { doc_id: d.doc.id.clone(), score: 1.0, sentences: d.sentences }
        })
        .collect();
    ctx
}

#[derive(Debug, Clone, Deserialize)]
struct RewardFile {
    kind: RewardKind,
    #[serde(default)]
    reference: Option<String>,
}

fn default_max_tokens() -> usize {
    3
}

/// Toy training task read from JSON.
#[derive(Debug, Clone, Deserialize)]
pub struct TaskFixture {
    pub vocab: Vec<String>,
    #[serde(default)]
    pub query: String,
    #[serde(default)]
    pub context: Vec<String>,
    reward: RewardFile,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
    /// Initial policy checkpoint, relative to the task file. Uniform if absent.
    pub init_policy: Option<String>,
}

impl TaskFixture {
    pub fn load(path: &Path) -> Result<Self, RlError> {
        let err = |reason: String| RlError::Task { path: path.display().to_string(), reason };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
    }

    pub fn reward_spec(&self) -> RewardSpec {
        RewardSpec {
            kind: self.reward.kind,
            reference: self.reward.reference.as_deref().map(tokenize).unwrap_or_default(),
            offset: 0.0,
        }
    }

    pub fn setup(&self) -> Setup {
        let x = tokenize(&self.query);
        Setup {
            context: context_from_texts(&self.context, &x),
            x,
            spec: self.reward_spec(),
            max_tokens: self.max_tokens,
        }
    }

    pub fn initial_policy(&self, task_path: &Path) -> Result<PolicyParams, RlError> {
        match &self.init_policy {
            Some(p) => {
                let base = task_path.parent().unwrap_or(Path::new("."));
                let policy = PolicyParams::load(&base.join(p))?;
                if policy.vocab() != self.vocab.as_slice() {
                    return Err(RlError::BadArg("init_policy vocabulary differs from task vocab".into()));
                }
                Ok(policy)
            }
            None => Ok(PolicyParams::uniform(self.vocab.clone())?),
        }
    }
}
