//! Training configuration and its flat key=value codec.
//!
//! The same key set backs the CLI's config files and flag overrides, and
//! the checkpoint's recorded config, so one parser serves all three. Keys
//! map 1:1 to CLI flags.

use crate::error::{Error, Result};
use crate::synth::CorpusSpec;

/// How evaluation treats the stochastic refinement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// K reparameterized draws from a fixed evaluation seed (default).
    Sampled,
    /// Zero-noise draws: refined = (tokens + K * mu) / (K + 1).
    MeanOnly,
}

impl EvalMode {
    fn as_str(self) -> &'static str {
        match self {
            EvalMode::Sampled => "sampled",
            EvalMode::MeanOnly => "mean",
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Gaussian draws per token per forward pass; 0 disables the
    /// distribution heads entirely.
    pub k: usize,
    pub eta: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub lambda_ot: f64,
    pub lambda_d: f64,
    pub tau: f64,
    pub seed: u64,
    /// Worker threads for per-pair transport solves; 0 = all available.
    pub threads: usize,
    /// Epochs between checkpoint snapshots.
    pub checkpoint_interval: usize,
    pub heads: usize,
    /// Head MLP hidden width; 0 = 4x half-width.
    pub mlp_hidden: usize,
    pub sigma_floor: f64,
    pub eval_mode: EvalMode,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch: 64,
            epochs: 30,
            k: 2,
            eta: 0.1,
            sinkhorn_iters: 100,
            sinkhorn_tol: 1e-6,
            lambda_ot: 1.0,
            lambda_d: 1.0,
            tau: 0.07,
            seed: 0,
            threads: 0,
            checkpoint_interval: 10,
            heads: 8,
            mlp_hidden: 0,
            sigma_floor: 1e-4,
            eval_mode: EvalMode::Sampled,
            eval_seed: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config { msg: format!("key `{key}`: cannot parse `{value}`") })
}

impl TrainConfig {
    /// Apply one key=value pair; Ok(false) means the key is not a training
    /// key (the caller may route it elsewhere).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "sinkhorn_iters" => self.sinkhorn_iters = parse(key, value)?,
            "sinkhorn_tol" => self.sinkhorn_tol = parse(key, value)?,
            "lambda_ot" => self.lambda_ot = parse(key, value)?,
            "lambda_d" => self.lambda_d = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "sigma_floor" => self.sigma_floor = parse(key, value)?,
            "eval_seed" => self.eval_seed = parse(key, value)?,
            "eval_mode" => {
                self.eval_mode = match value {
                    "sampled" => EvalMode::Sampled,
                    "mean" => EvalMode::MeanOnly,
                    other => {
                        return Err(Error::Config { msg: format!("key `eval_mode`: `{other}` (sampled or mean)") })
                    }
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical key=value serialization (fixed key order).
    pub fn to_kv_string(&self) -> String {
        format!(
            "lr={}\nbatch={}\nepochs={}\nk={}\neta={}\nsinkhorn_iters={}\nsinkhorn_tol={}\n\
             lambda_ot={}\nlambda_d={}\ntau={}\nseed={}\nthreads={}\ncheckpoint_interval={}\n\
             heads={}\nmlp_hidden={}\nsigma_floor={}\neval_mode={}\neval_seed={}\n",
            self.lr,
            self.batch,
            self.epochs,
            self.k,
            self.eta,
            self.sinkhorn_iters,
            self.sinkhorn_tol,
            self.lambda_ot,
            self.lambda_d,
            self.tau,
            self.seed,
            self.threads,
            self.checkpoint_interval,
            self.heads,
            self.mlp_hidden,
            self.sigma_floor,
            self.eval_mode.as_str(),
            self.eval_seed,
        )
    }

    /// Rebuild from the canonical serialization.
    pub fn from_kv_string(s: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in s.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config { msg: format!("malformed config line `{line}`") });
            };
            if !cfg.apply_kv(key.trim(), value.trim())? {
                return Err(Error::Config { msg: format!("unknown training key `{}`", key.trim()) });
            }
        }
        Ok(cfg)
    }

    /// Validate ranges; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let err = |msg: String| Err(Error::Config { msg });
        if !(self.lr >= 0.0) {
            return err(format!("lr {} must be >= 0", self.lr));
        }
        if self.batch == 0 {
            return err("batch must be >= 1".into());
        }
        if !(self.eta > 0.0) {
            return err(format!("eta {} must be > 0", self.eta));
        }
        if self.sinkhorn_iters == 0 {
            return err("sinkhorn_iters must be >= 1".into());
        }
        if !(self.sinkhorn_tol > 0.0) {
            return err(format!("sinkhorn_tol {} must be > 0", self.sinkhorn_tol));
        }
        if !(self.tau > 0.0) {
            return err(format!("tau {} must be > 0", self.tau));
        }
        if !(self.lambda_ot >= 0.0) || !(self.lambda_d >= 0.0) {
            return err("lambda_ot and lambda_d must be >= 0".into());
        }
        if self.heads == 0 {
            return err("heads must be >= 1".into());
        }
        if !(self.sigma_floor >= 0.0) {
            return err(format!("sigma_floor {} must be >= 0", self.sigma_floor));
        }
        let mut warnings = Vec::new();
        if self.batch == 1 {
            warnings.push("batch=1: both contrastive losses are identically 0, nothing trains".to_string());
        }
        Ok(warnings)
    }
}

/// Apply a corpus key. Ok(false) when the key is not a corpus key.
pub fn apply_corpus_kv(spec: &mut CorpusSpec, key: &str, value: &str) -> Result<bool> {
    match key {
        "pairs" => spec.pairs = parse(key, value)?,
        "vocab" => spec.vocab = parse(key, value)?,
        "video_len_min" => spec.video_len.0 = parse(key, value)?,
        "video_len_max" => spec.video_len.1 = parse(key, value)?,
        "text_len_min" => spec.text_len.0 = parse(key, value)?,
        "text_len_max" => spec.text_len.1 = parse(key, value)?,
        "dim" => spec.dim = parse(key, value)?,
        "rho" => spec.rho = parse(key, value)?,
        "noise" => spec.noise = parse(key, value)?,
        "seed" => spec.seed = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// FNV-1a over bytes; the checkpoint's config hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Deterministic per-stream seed derivation from a base seed and tags.
pub fn stream_seed(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(8 + tag.len() + indices.len() * 8);
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    for &i in indices {
        bytes.extend_from_slice(&i.to_le_bytes());
    }
    fnv1a64(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headline_defaults_and_large_scale_values() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr, 1e-5);
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.lambda_ot, 1.0);
        assert_eq!(cfg.tau, 0.07);
        assert_eq!(cfg.heads, 8);
        // Large-scale settings stay reachable through the same keys.
        let big = TrainConfig::from_kv_string("batch=512\nepochs=200\n").unwrap();
        assert_eq!(big.batch, 512);
        assert_eq!(big.epochs, 200);
    }

    #[test]
    fn defaults_round_trip_through_kv() {
        let cfg = TrainConfig::default();
        let s = cfg.to_kv_string();
        let back = TrainConfig::from_kv_string(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn non_default_round_trip() {
        let cfg = TrainConfig {
            lr: 3e-3,
            k: 0,
            lambda_ot: 0.0,
            eval_mode: EvalMode::MeanOnly,
            seed: 991,
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_kv_string(&cfg.to_kv_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_training_key_rejected() {
        assert!(TrainConfig::from_kv_string("lr_sched=cosine\n").is_err());
    }

    #[test]
    fn bad_value_names_key() {
        let err = TrainConfig::from_kv_string("lr=fast\n").unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let cfg = TrainConfig { tau: 0.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { eta: -0.1, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { batch: 1, ..TrainConfig::default() };
        let warnings = cfg.validate().unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn corpus_keys_apply() {
        let mut spec = CorpusSpec::default();
        assert!(apply_corpus_kv(&mut spec, "pairs", "123").unwrap());
        assert!(apply_corpus_kv(&mut spec, "rho", "5").unwrap());
        assert!(apply_corpus_kv(&mut spec, "video_len_max", "12").unwrap());
        assert!(!apply_corpus_kv(&mut spec, "lr", "0.1").unwrap());
        assert_eq!(spec.pairs, 123);
        assert_eq!(spec.rho, 5);
        assert_eq!(spec.video_len.1, 12);
    }

    #[test]
    fn stream_seed_distinguishes_tags_and_indices() {
        let a = stream_seed(7, "eps", &[1, 2]);
        let b = stream_seed(7, "eps", &[1, 3]);
        let c = stream_seed(7, "shuffle", &[1, 2]);
        let d = stream_seed(8, "eps", &[1, 2]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a, stream_seed(7, "eps", &[1, 2]));
    }
}
