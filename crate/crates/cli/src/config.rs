//! Run configuration: built-in defaults, then an optional JSON file, then
//! the `LORAG_ENDPOINT` environment variable for a missing remote endpoint,
//! then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lorag_core::{Backend, GeneratorConfig, LoopConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ENDPOINT_ENV: &str = "LORAG_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub index_dir: Option<PathBuf>,
    pub generator: GeneratorConfig,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            index_dir: None,
            generator: GeneratorConfig::stub(64, 2),
            loop_cfg: LoopConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Flags shared by `run` and `eval` that can override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub index_dir: Option<PathBuf>,
    pub max_iters: Option<usize>,
    pub epsilon: Option<f64>,
    pub k: Option<usize>,
    pub w_y: Option<f64>,
    pub backend: Option<Backend>,
    pub endpoint: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn resolve(file: Option<&Path>, env_endpoint: Option<String>, flags: Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if cfg.generator.endpoint_url.is_none() {
            cfg.generator.endpoint_url = env_endpoint.filter(|e| !e.is_empty());
        }

        let Overrides { index_dir, max_iters, epsilon, k, w_y, backend, endpoint, seed, output_dir } = flags;
        if let Some(b) = backend {
            if b != cfg.generator.backend {
                cfg.generator = switch_backend(&cfg.generator, b);
            }
        }
        set(&mut cfg.index_dir, index_dir.map(Some));
        set(&mut cfg.loop_cfg.max_iters, max_iters);
        set(&mut cfg.loop_cfg.epsilon, epsilon);
        set(&mut cfg.loop_cfg.k, k);
        set(&mut cfg.loop_cfg.w_y, w_y);
        set(&mut cfg.generator.endpoint_url, endpoint.map(Some));
        set(&mut cfg.seed, seed);
        set(&mut cfg.output_dir, output_dir);

        cfg.loop_cfg.validate().map_err(anyhow::Error::msg)?;
        cfg.generator.validate()?;
        Ok(cfg)
    }

    pub fn index_dir(&self) -> Result<&Path> {
        match &self.index_dir {
            Some(p) => Ok(p),
            None => bail!("no index directory given (use --index or index_dir in the config file)"),
        }
    }

    /// Hex prefix of SHA-256 over the query and the serialized config.
    pub fn content_hash(&self, query: &str) -> String {
        let mut h = Sha256::new();
        h.update(query.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex::encode(&h.finalize()[..8])
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Keeps the shared fields and fills backend-specific ones with defaults.
fn switch_backend(old: &GeneratorConfig, backend: Backend) -> GeneratorConfig {
    let mut g = match backend {
        Backend::Stub => GeneratorConfig::stub(old.max_tokens, old.top_sentences.unwrap_or(2)),
        Backend::Remote => GeneratorConfig::remote(String::new(), old.max_tokens, old.temperature.unwrap_or(1.0)),
        Backend::ToyPolicy => GeneratorConfig::toy_policy(old.max_tokens, old.temperature.unwrap_or(1.0)),
    };
    g.endpoint_url = old.endpoint_url.clone().filter(|_| backend == Backend::Remote);
    g.policy_path = old.policy_path.clone();
    g
}
