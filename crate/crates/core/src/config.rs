//! Experiment configuration: a versioned `key = value` text file holding
//! the class split, embedding source, world spec, model, training and
//! evaluation parameters. Every key has a default and [`ExperimentConfig::to_text`]
//! writes all of them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use ssnav_tensor::OptimizerKind;

use crate::eval::EvalConfig;
use crate::model::{ActMode, ModelConfig, ModelKind};
use crate::reward::RewardConfig;
use crate::semantic::{load_embeddings, synth_embeddings, ClassSplit, EmbeddingTable, SemanticError};
use crate::training::TrainConfig;
use crate::world::WorldSpec;

pub const CONFIG_HEADER: &str = "ssnav-config v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config key `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Master seed for world pools and evaluation.
    pub seed: u64,
    /// Seed for parameter init and rollouts.
    pub train_seed: u64,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub irrelevant: Vec<String>,
    /// GloVe-style file; synthetic embeddings are generated when absent.
    pub embedding_file: Option<PathBuf>,
    pub embedding_dim: usize,
    pub embedding_seed: u64,
    /// Cluster per class, aligned with seen ++ unseen ++ irrelevant.
    pub clusters: Vec<usize>,
    pub world: WorldSpec,
    pub n_train_worlds: usize,
    pub n_test_worlds: usize,
    pub model: ModelConfig,
    pub episodes_total: usize,
    pub max_steps: usize,
    pub gamma: f64,
    pub entropy_weight: f64,
    pub value_weight: f64,
    pub n_workers: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    pub log_interval: usize,
    pub wall_clock: bool,
    pub reward: RewardConfig,
    pub eval_episodes: usize,
    pub eval_mode: ActMode,
    pub eval_max_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        Self {
            seed: 0,
            train_seed: 0,
            seen: names("seen", 4),
            unseen: names("unseen", 2),
            irrelevant: names("irrelevant", 2),
            embedding_file: None,
            embedding_dim: 16,
            embedding_seed: 0,
            clusters: vec![0, 0, 1, 1, 0, 1, 0, 1],
            world: WorldSpec::default(),
            n_train_worlds: 8,
            n_test_worlds: 4,
            model: ModelConfig::default(),
            episodes_total: 50_000,
            max_steps: 50,
            gamma: 0.99,
            entropy_weight: 0.01,
            value_weight: 0.5,
            n_workers: 1,
            lr: 1e-4,
            grad_clip: Some(40.0),
            log_interval: 100,
            wall_clock: true,
            reward: RewardConfig::default(),
            eval_episodes: 250,
            eval_mode: ActMode::Greedy,
            eval_max_steps: 50,
        }
    }
}

fn value_err(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| value_err(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(value_err(key, format!("expected true or false, got `{v}`"))),
    }
}

fn words(v: &str) -> Vec<String> {
    v.split_whitespace().map(str::to_string).collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, h)) if h.trim() == CONFIG_HEADER => {}
            Some((n, h)) => {
                return Err(ConfigError::Syntax {
                    line: n,
                    msg: format!("expected header `{CONFIG_HEADER}`, found `{h}`"),
                })
            }
            None => {
                return Err(ConfigError::Syntax {
                    line: 0,
                    msg: "empty config".into(),
                })
            }
        }
        let mut cfg = Self::default();
        let mut seen_keys = std::collections::HashSet::new();
        let mut train_seed_set = false;
        for (n, raw) in lines {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            if !seen_keys.insert(key.to_string()) {
                return Err(ConfigError::Syntax {
                    line: n,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            let w = &mut cfg.world;
            match key {
                "seed" => cfg.seed = parse_num(key, v)?,
                "train_seed" => {
                    cfg.train_seed = parse_num(key, v)?;
                    train_seed_set = true;
                }
                "seen" => cfg.seen = words(v),
                "unseen" => cfg.unseen = words(v),
                "irrelevant" => cfg.irrelevant = words(v),
                "embedding_file" => {
                    cfg.embedding_file = if v.is_empty() || v == "none" { None } else { Some(PathBuf::from(v)) }
                }
                "embedding_dim" => cfg.embedding_dim = parse_num(key, v)?,
                "embedding_seed" => cfg.embedding_seed = parse_num(key, v)?,
                "clusters" => {
                    cfg.clusters = v
                        .split_whitespace()
                        .map(|c| parse_num(key, c))
                        .collect::<Result<_>>()?
                }
                "width" => w.width = parse_num(key, v)?,
                "height" => w.height = parse_num(key, v)?,
                "wall_density" => w.wall_density = parse_num(key, v)?,
                "objects_min" => w.objects_per_class.0 = parse_num(key, v)?,
                "objects_max" => w.objects_per_class.1 = parse_num(key, v)?,
                "co_location_bias" => w.co_location_bias = parse_num(key, v)?,
                "band_weights" => {
                    let b: Vec<f64> = v
                        .split_whitespace()
                        .map(|x| parse_num(key, x))
                        .collect::<Result<_>>()?;
                    w.band_weights = b
                        .try_into()
                        .map_err(|_| value_err(key, "expected three weights"))?;
                }
                "size_min" => w.size_range.0 = parse_num(key, v)?,
                "size_max" => w.size_range.1 = parse_num(key, v)?,
                "wall_retries" => w.wall_retries = parse_num(key, v)?,
                "n_train_worlds" => cfg.n_train_worlds = parse_num(key, v)?,
                "n_test_worlds" => cfg.n_test_worlds = parse_num(key, v)?,
                "model" => {
                    cfg.model.kind = ModelKind::parse(v).ok_or_else(|| value_err(key, format!("unknown model `{v}`")))?
                }
                "self_attention" => cfg.model.self_attention = parse_bool(key, v)?,
                "d_in" => cfg.model.d_in = parse_num(key, v)?,
                "d_attn" => cfg.model.d_attn = parse_num(key, v)?,
                "hidden" => cfg.model.hidden = parse_num(key, v)?,
                "d_visual" => cfg.model.d_visual = parse_num(key, v)?,
                "episodes_total" => cfg.episodes_total = parse_num(key, v)?,
                "max_steps" => cfg.max_steps = parse_num(key, v)?,
                "gamma" => cfg.gamma = parse_num(key, v)?,
                "entropy_weight" => cfg.entropy_weight = parse_num(key, v)?,
                "value_weight" => cfg.value_weight = parse_num(key, v)?,
                "n_workers" => cfg.n_workers = parse_num(key, v)?,
                "lr" => cfg.lr = parse_num(key, v)?,
                "grad_clip" => cfg.grad_clip = if v == "off" { None } else { Some(parse_num(key, v)?) },
                "log_interval" => cfg.log_interval = parse_num(key, v)?,
                "wall_clock" => cfg.wall_clock = parse_bool(key, v)?,
                "success_reward" => cfg.reward.success_reward = parse_num(key, v)?,
                "step_penalty" => cfg.reward.step_penalty = parse_num(key, v)?,
                "partial_reward" => cfg.reward.partial_reward_enabled = parse_bool(key, v)?,
                "eval_episodes" => cfg.eval_episodes = parse_num(key, v)?,
                "eval_mode" => {
                    cfg.eval_mode = match v {
                        "greedy" => ActMode::Greedy,
                        "sample" => ActMode::Sample,
                        _ => return Err(value_err(key, format!("expected greedy or sample, got `{v}`"))),
                    }
                }
                "eval_max_steps" => cfg.eval_max_steps = parse_num(key, v)?,
                _ => {
                    return Err(ConfigError::Syntax {
                        line: n,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        if !train_seed_set {
            cfg.train_seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(file), Some(dir)) = (&cfg.embedding_file, path.parent()) {
            if file.is_relative() {
                cfg.embedding_file = Some(dir.join(file));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.split()?;
        if self.embedding_file.is_none() && self.clusters.len() != self.seen.len() + self.unseen.len() + self.irrelevant.len() {
            return Err(ConfigError::Invalid(format!(
                "{} clusters for {} classes",
                self.clusters.len(),
                self.seen.len() + self.unseen.len() + self.irrelevant.len()
            )));
        }
        if self.embedding_dim == 0 {
            return Err(ConfigError::Invalid("embedding_dim must be positive".into()));
        }
        if self.eval_max_steps == 0 {
            return Err(ConfigError::Invalid("eval_max_steps must be at least 1".into()));
        }
        self.world
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.kind != ModelKind::Random {
            self.train_config()?
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn split(&self) -> Result<ClassSplit> {
        Ok(ClassSplit::new(&self.seen, &self.unseen, &self.irrelevant)?)
    }

    /// Loads the embedding file or generates synthetic embeddings.
    pub fn embeddings(&self) -> Result<EmbeddingTable> {
        let split = self.split()?;
        let classes: Vec<&str> = split.all_classes().collect();
        match &self.embedding_file {
            Some(path) => Ok(load_embeddings(path, &classes)?),
            None => Ok(synth_embeddings(self.embedding_seed, &classes, self.embedding_dim, &self.clusters)?),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            episodes_total: self.episodes_total,
            max_steps: self.max_steps,
            gamma: self.gamma,
            entropy_weight: self.entropy_weight,
            value_weight: self.value_weight,
            n_workers: self.n_workers,
            lr: self.lr,
            optimizer: OptimizerKind::adam(),
            grad_clip: self.grad_clip,
            seed: self.train_seed,
            log_interval: self.log_interval,
            wall_clock: self.wall_clock,
            n_train_worlds: self.n_train_worlds,
            reward: self.reward,
            model: self.model.clone(),
            split: self.split()?,
            world_spec: self.world.clone(),
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_episodes: self.eval_episodes,
            seed: self.seed,
            mode: self.eval_mode,
            max_steps: self.eval_max_steps,
        }
    }

    /// Full echo of every key, defaults included.
    pub fn to_text(&self) -> String {
        let mut o = String::from(CONFIG_HEADER);
        o.push('\n');
        let mut kv = |k: &str, v: String| {
            writeln!(o, "{k} = {v}").unwrap();
        };
        let join = |xs: &[String]| xs.join(" ");
        let w = &self.world;
        kv("seed", self.seed.to_string());
        kv("train_seed", self.train_seed.to_string());
        kv("seen", join(&self.seen));
        kv("unseen", join(&self.unseen));
        kv("irrelevant", join(&self.irrelevant));
        kv(
            "embedding_file",
            self.embedding_file
                .as_ref()
                .map_or("none".to_string(), |p| p.display().to_string()),
        );
        kv("embedding_dim", self.embedding_dim.to_string());
        kv("embedding_seed", self.embedding_seed.to_string());
        kv(
            "clusters",
            self.clusters.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
        );
        kv("width", w.width.to_string());
        kv("height", w.height.to_string());
        kv("wall_density", w.wall_density.to_string());
        kv("objects_min", w.objects_per_class.0.to_string());
        kv("objects_max", w.objects_per_class.1.to_string());
        kv("co_location_bias", w.co_location_bias.to_string());
        kv(
            "band_weights",
            w.band_weights.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(" "),
        );
        kv("size_min", w.size_range.0.to_string());
        kv("size_max", w.size_range.1.to_string());
        kv("wall_retries", w.wall_retries.to_string());
        kv("n_train_worlds", self.n_train_worlds.to_string());
        kv("n_test_worlds", self.n_test_worlds.to_string());
        kv("model", self.model.kind.as_str().to_string());
        kv("self_attention", self.model.self_attention.to_string());
        kv("d_in", self.model.d_in.to_string());
        kv("d_attn", self.model.d_attn.to_string());
        kv("hidden", self.model.hidden.to_string());
        kv("d_visual", self.model.d_visual.to_string());
        kv("episodes_total", self.episodes_total.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("gamma", self.gamma.to_string());
        kv("entropy_weight", self.entropy_weight.to_string());
        kv("value_weight", self.value_weight.to_string());
        kv("n_workers", self.n_workers.to_string());
        kv("lr", self.lr.to_string());
        kv("grad_clip", self.grad_clip.map_or("off".to_string(), |c| c.to_string()));
        kv("log_interval", self.log_interval.to_string());
        kv("wall_clock", self.wall_clock.to_string());
        kv("success_reward", self.reward.success_reward.to_string());
        kv("step_penalty", self.reward.step_penalty.to_string());
        kv("partial_reward", self.reward.partial_reward_enabled.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("eval_mode", self.eval_mode.as_str().to_string());
        kv("eval_max_steps", self.eval_max_steps.to_string());
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let text = format!("{CONFIG_HEADER}\n# comment\nseed = 9  # trailing\nlr = 0.001\ngrad_clip = off\n");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train_seed, 9);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.grad_clip, None);
        assert_eq!(cfg.max_steps, 50);
        let tc = cfg.train_config().unwrap();
        assert_eq!((tc.gamma, tc.entropy_weight, tc.value_weight), (0.99, 0.01, 0.5));
    }

    #[test]
    fn errors() {
        let bad = [
            "ssnav-config v2\n".to_string(),
            format!("{CONFIG_HEADER}\nnonsense\n"),
            format!("{CONFIG_HEADER}\nbogus = 1\n"),
            format!("{CONFIG_HEADER}\nseed = 1\nseed = 2\n"),
            format!("{CONFIG_HEADER}\nlr = fast\n"),
            format!("{CONFIG_HEADER}\ngamma = 1.5\n"),
            format!("{CONFIG_HEADER}\nclusters = 0 1\n"),
            format!("{CONFIG_HEADER}\nunseen = seen0\n"),
            format!("{CONFIG_HEADER}\nband_weights = 1 1\n"),
        ];
        for text in bad {
            assert!(ExperimentConfig::parse(&text).is_err(), "{text}");
        }
    }

    #[test]
    fn embeddings_follow_clusters() {
        let cfg = ExperimentConfig::default();
        let table = cfg.embeddings().unwrap();
        assert_eq!(table.len(), 8);
        assert!(table.similarity("seen0", "unseen0").unwrap() >= 0.7);
        assert!(table.similarity("seen0", "unseen1").unwrap() <= 0.3);
    }
}
