//! Semantic reward: a step earns the highest embedding similarity between
//! the target and any visible seen or irrelevant object, but only when it
//! beats the best similarity already collected this episode.

use thiserror::Error;

use crate::semantic::{ClassRole, ClassSplit, EmbeddingTable, SemanticError};
use crate::world::Action;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("reward target `{0}` is not a seen class")]
    TargetNotSeen(String),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

/// Episode-scoped running maximum of collected similarity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardState {
    pub cs_max: f64,
}

impl RewardState {
    pub fn new() -> Self {
        Self { cs_max: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub success_reward: f64,
    pub step_penalty: f64,
    pub partial_reward_enabled: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            success_reward: 5.0,
            step_penalty: -0.01,
            partial_reward_enabled: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.success_reward > 0.0) {
            return Err(RewardError::InvalidConfig(format!(
                "success_reward {} must be positive",
                self.success_reward
            )));
        }
        if !(self.step_penalty < 0.0) {
            return Err(RewardError::InvalidConfig(format!(
                "step_penalty {} must be negative",
                self.step_penalty
            )));
        }
        Ok(())
    }
}

/// One reward transition.
///
/// `visible` lists the classes of the currently visible objects; unseen
/// classes among them are ignored. On `Done` the reward is the success
/// reward if the target itself is visible, else 0, and the state is left
/// untouched.
pub fn semantic_reward<S: AsRef<str>>(
    state: RewardState,
    action: Action,
    target: &str,
    visible: &[S],
    split: &ClassSplit,
    table: &EmbeddingTable,
    cfg: &RewardConfig,
) -> Result<(f64, RewardState), RewardError> {
    match split.role(target) {
        Some(ClassRole::Seen) => {}
        Some(_) => return Err(RewardError::TargetNotSeen(target.to_string())),
        None => return Err(RewardError::UnknownClass(target.to_string())),
    }
    for v in visible {
        if split.role(v.as_ref()).is_none() {
            return Err(RewardError::UnknownClass(v.as_ref().to_string()));
        }
    }
    if action == Action::Done {
        let found = visible.iter().any(|v| v.as_ref() == target);
        let r = if found { cfg.success_reward } else { 0.0 };
        return Ok((r, state));
    }
    if !cfg.partial_reward_enabled {
        return Ok((cfg.step_penalty, state));
    }
    let g_t = table.get(target)?;
    let mut best: Option<f64> = None;
    for v in visible {
        let class = v.as_ref();
        if split.model_row(class).is_none() {
            continue;
        }
        let cs = crate::semantic::cosine_similarity(table.get(class)?, g_t)?;
        best = Some(best.map_or(cs, |b: f64| b.max(cs)));
    }
    match best {
        Some(cs) if cs > state.cs_max => Ok((cs, RewardState { cs_max: cs })),
        _ => Ok((cfg.step_penalty, state)),
    }
}
