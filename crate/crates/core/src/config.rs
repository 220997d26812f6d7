//! Flat `key = value` run configuration.
//!
//! Defaults: 300-d word vectors, 20 aspects, λ = 0.8, 3 attention heads of
//! total width 300, generator hidden size 200, 10 epochs and
//! μ = 0.05·|S_qa|.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "AITA_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub embedding_dim: usize,
    pub aspect_dim: usize,
    pub lambda: f64,
    pub heads: usize,
    pub attn_dim: usize,
    pub gen_hidden: usize,
    pub gen_bottleneck: usize,
    pub epochs: usize,
    pub mu_fraction: f64,
    /// `-1`: rewards favor low perplexity (softmax of negated values);
    /// `+1`: raw log-perplexity normalized by the group sum.
    pub reward_sign: i32,
    /// `+1` ascends the ranker objective, `-1` descends it.
    pub objective_sign: i32,
    pub ranker_lr: f64,
    pub gen_lr: f64,
    pub seed: u64,
    pub min_count: usize,
    pub max_q_len: usize,
    pub max_review_len: usize,
    pub max_qa_len: usize,
    pub beam_size: usize,
    pub gen_passes: usize,
    pub ranker_passes: usize,
    pub gen_batch_size: usize,
    pub ranker_batch_size: usize,
    pub use_aspect: bool,
    pub use_copy: bool,
    /// Optional pretrained word-vector file. Paths are not part of the hash.
    pub embeddings: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embedding_dim: 300,
            aspect_dim: 20,
            lambda: 0.8,
            heads: 3,
            attn_dim: 300,
            gen_hidden: 200,
            gen_bottleneck: 200,
            epochs: 10,
            mu_fraction: 0.05,
            reward_sign: -1,
            objective_sign: 1,
            ranker_lr: 1e-3,
            gen_lr: 1e-3,
            seed: 42,
            min_count: 2,
            max_q_len: 30,
            max_review_len: 50,
            max_qa_len: 80,
            beam_size: 1,
            gen_passes: 1,
            ranker_passes: 1,
            gen_batch_size: 16,
            ranker_batch_size: 8,
            use_aspect: true,
            use_copy: true,
            embeddings: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Hashed settings in a fixed order.
    fn hashed_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("aspect_dim", self.aspect_dim.to_string()),
            ("attn_dim", self.attn_dim.to_string()),
            ("beam_size", self.beam_size.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("epochs", self.epochs.to_string()),
            ("gen_batch_size", self.gen_batch_size.to_string()),
            ("gen_bottleneck", self.gen_bottleneck.to_string()),
            ("gen_hidden", self.gen_hidden.to_string()),
            ("gen_lr", self.gen_lr.to_string()),
            ("gen_passes", self.gen_passes.to_string()),
            ("heads", self.heads.to_string()),
            ("lambda", self.lambda.to_string()),
            ("max_q_len", self.max_q_len.to_string()),
            ("max_qa_len", self.max_qa_len.to_string()),
            ("max_review_len", self.max_review_len.to_string()),
            ("min_count", self.min_count.to_string()),
            ("mu_fraction", self.mu_fraction.to_string()),
            ("objective_sign", self.objective_sign.to_string()),
            ("ranker_batch_size", self.ranker_batch_size.to_string()),
            ("ranker_lr", self.ranker_lr.to_string()),
            ("ranker_passes", self.ranker_passes.to_string()),
            ("reward_sign", self.reward_sign.to_string()),
            ("seed", self.seed.to_string()),
            ("use_aspect", self.use_aspect.to_string()),
            ("use_copy", self.use_copy.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "aspect_dim" => self.aspect_dim = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "attn_dim" => self.attn_dim = parse(key, value)?,
            "gen_hidden" => self.gen_hidden = parse(key, value)?,
            "gen_bottleneck" => self.gen_bottleneck = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "mu_fraction" => self.mu_fraction = parse(key, value)?,
            "reward_sign" => self.reward_sign = parse(key, value)?,
            "objective_sign" => self.objective_sign = parse(key, value)?,
            "ranker_lr" => self.ranker_lr = parse(key, value)?,
            "gen_lr" => self.gen_lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "max_q_len" => self.max_q_len = parse(key, value)?,
            "max_review_len" => self.max_review_len = parse(key, value)?,
            "max_qa_len" => self.max_qa_len = parse(key, value)?,
            "beam_size" => self.beam_size = parse(key, value)?,
            "gen_passes" => self.gen_passes = parse(key, value)?,
            "ranker_passes" => self.ranker_passes = parse(key, value)?,
            "gen_batch_size" => self.gen_batch_size = parse(key, value)?,
            "ranker_batch_size" => self.ranker_batch_size = parse(key, value)?,
            "use_aspect" => self.use_aspect = parse(key, value)?,
            "use_copy" => self.use_copy = parse(key, value)?,
            "embeddings" => {
                self.embeddings = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Applies the `AITA_SEED` override when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, seed.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("aspect_dim", self.aspect_dim),
            ("heads", self.heads),
            ("attn_dim", self.attn_dim),
            ("gen_hidden", self.gen_hidden),
            ("gen_bottleneck", self.gen_bottleneck),
            ("min_count", self.min_count),
            ("max_q_len", self.max_q_len),
            ("max_review_len", self.max_review_len),
            ("max_qa_len", self.max_qa_len),
            ("beam_size", self.beam_size),
            ("gen_batch_size", self.gen_batch_size),
            ("ranker_batch_size", self.ranker_batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.attn_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attn_dim {} is not divisible by heads {}",
                self.attn_dim, self.heads
            )));
        }
        if self.reward_sign.abs() != 1 || self.objective_sign.abs() != 1 {
            return Err(Error::Config("reward_sign and objective_sign must be 1 or -1".into()));
        }
        if !(0.0..=1.0).contains(&self.mu_fraction) {
            return Err(Error::Config("mu_fraction must lie in [0, 1]".into()));
        }
        if self.lambda < 0.0 || self.ranker_lr < 0.0 || self.gen_lr < 0.0 {
            return Err(Error::Config("lambda and learning rates must be non-negative".into()));
        }
        Ok(())
    }

    /// Effective configuration as sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.hashed_entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        if let Some(p) = &self.embeddings {
            let _ = writeln!(out, "embeddings = {}", p.display());
        }
        out
    }

    /// Short SHA-256 digest of every setting except paths.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.hashed_entries() {
            hasher.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(hasher.finalize())[..16].to_string()
    }

    /// μ for a QA set of the given size.
    pub fn mu(&self, n_qa: usize) -> usize {
        (self.mu_fraction * n_qa as f64).round() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_settings() {
        let c = RunConfig::default();
        assert_eq!(c.aspect_dim, 20);
        assert_eq!(c.lambda, 0.8);
        assert_eq!(c.heads, 3);
        assert_eq!(c.attn_dim, 300);
        assert_eq!(c.embedding_dim, 300);
        assert_eq!(c.gen_hidden, 200);
        assert_eq!(c.epochs, 10);
        assert_eq!(c.mu_fraction, 0.05);
        assert_eq!(c.mu(200), 10);
        assert_eq!(c.reward_sign, -1);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip_preserves_hash() {
        let mut c = RunConfig::default();
        c.set("lambda", "0.5").unwrap();
        c.set("embeddings", "/tmp/glove.txt").unwrap();
        let back = RunConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn paths_do_not_change_the_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.embeddings = Some("x.txt".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse_str("nonsense").is_err());
        assert!(RunConfig::parse_str("bogus = 1").is_err());
        assert!(RunConfig::parse_str("heads = x").is_err());
        assert!(RunConfig::parse_str("heads = 7").is_err());
        assert!(RunConfig::parse_str("reward_sign = 0").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse_str("# reduced\n\nembedding_dim = 32\nattn_dim=30\n").unwrap();
        assert_eq!(c.embedding_dim, 32);
        assert_eq!(c.attn_dim, 30);
    }
}
