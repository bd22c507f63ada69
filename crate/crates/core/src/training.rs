//! Episode rollout and advantage actor-critic training.
//!
//! Synchronous mode (`n_workers == 1`) runs rollout, backward and update
//! strictly in sequence and is bit-reproducible. With more workers each
//! thread snapshots the shared parameters, rolls out an episode, computes
//! gradients and submits them for serialized application.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::{mpsc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use ssnav_tensor::{clip_global_norm, Checkpoint, Graph, Optimizer, OptimizerKind, ParamStore, Tensor, TensorError, Var};

use crate::model::{act, step_output, ActMode, EpisodeContext, ModelConfig, ModelError, ModelKind, Network, Observation};
use crate::reward::{semantic_reward, RewardConfig, RewardError, RewardState};
use crate::seeds::derive_seed;
use crate::semantic::{ClassRole, ClassSplit, EmbeddingTable};
use crate::world::{gen_world, step, success_check, visible_objects, Action, GridWorld, Pose, WorldError, WorldSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training log line {line}: {msg}")]
    Log { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl From<crate::semantic::SemanticError> for TrainError {
    fn from(e: crate::semantic::SemanticError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episodes_total: usize,
    pub max_steps: usize,
    pub gamma: f64,
    pub entropy_weight: f64,
    pub value_weight: f64,
    pub n_workers: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Episodes per training-log row and moving-average window.
    pub log_interval: usize,
    /// Record elapsed seconds in the log; when false the column is 0.
    pub wall_clock: bool,
    pub n_train_worlds: usize,
    pub reward: RewardConfig,
    pub model: ModelConfig,
    pub split: ClassSplit,
    pub world_spec: WorldSpec,
}

impl TrainConfig {
    pub fn new(split: ClassSplit) -> Self {
        Self {
            episodes_total: 50_000,
            max_steps: 50,
            gamma: 0.99,
            entropy_weight: 0.01,
            value_weight: 0.5,
            n_workers: 1,
            lr: 1e-4,
            optimizer: OptimizerKind::adam(),
            grad_clip: Some(40.0),
            seed: 0,
            log_interval: 100,
            wall_clock: true,
            n_train_worlds: 8,
            reward: RewardConfig::default(),
            model: ModelConfig::default(),
            split,
            world_spec: WorldSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.n_workers == 0 {
            return bad("n_workers must be at least 1".into());
        }
        if self.log_interval == 0 {
            return bad("log_interval must be at least 1".into());
        }
        if !(self.entropy_weight >= 0.0 && self.value_weight >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        if self.n_train_worlds == 0 {
            return bad("n_train_worlds must be at least 1".into());
        }
        if self.model.kind == ModelKind::Random {
            return bad("the random policy has nothing to train".into());
        }
        self.reward.validate()?;
        self.world_spec.validate()?;
        Ok(())
    }

    /// `key = value` pairs echoed into every training-log header.
    pub fn header(&self) -> Vec<(String, String)> {
        let mut h = vec![
            ("episodes_total", self.episodes_total.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("gamma", self.gamma.to_string()),
            ("entropy_weight", self.entropy_weight.to_string()),
            ("value_weight", self.value_weight.to_string()),
            ("n_workers", self.n_workers.to_string()),
            ("lr", self.lr.to_string()),
            (
                "grad_clip",
                self.grad_clip.map_or("off".to_string(), |c| c.to_string()),
            ),
            ("seed", self.seed.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("n_train_worlds", self.n_train_worlds.to_string()),
            ("success_reward", self.reward.success_reward.to_string()),
            ("step_penalty", self.reward.step_penalty.to_string()),
            ("partial_reward", self.reward.partial_reward_enabled.to_string()),
            ("model", self.model.kind.as_str().to_string()),
            ("self_attention", self.model.self_attention.to_string()),
        ];
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            h.push(("optimizer", format!("adam {beta1} {beta2} {eps}")));
        } else {
            h.push(("optimizer", "sgd".to_string()));
        }
        h.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Produces per-step rewards during a rollout.
pub trait RewardFn {
    fn begin(&mut self);
    fn reward(&mut self, action: Action, target: &str, visible: &[&str]) -> Result<f64>;
}

/// The semantic reward with its per-episode running maximum.
pub struct SemanticRewardFn<'a> {
    pub split: &'a ClassSplit,
    pub table: &'a EmbeddingTable,
    pub config: RewardConfig,
    state: RewardState,
}

impl<'a> SemanticRewardFn<'a> {
    pub fn new(split: &'a ClassSplit, table: &'a EmbeddingTable, config: RewardConfig) -> Self {
        Self {
            split,
            table,
            config,
            state: RewardState::new(),
        }
    }
}

impl RewardFn for SemanticRewardFn<'_> {
    fn begin(&mut self) {
        self.state = RewardState::new();
    }

    fn reward(&mut self, action: Action, target: &str, visible: &[&str]) -> Result<f64> {
        let (r, s) = semantic_reward(self.state, action, target, visible, self.split, self.table, &self.config)?;
        self.state = s;
        Ok(r)
    }
}

/// Zero reward everywhere; used where rewards are not needed.
pub struct NoReward;

impl RewardFn for NoReward {
    fn begin(&mut self) {}

    fn reward(&mut self, _: Action, _: &str, _: &[&str]) -> Result<f64> {
        Ok(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub observation: Observation,
    pub pose: Pose,
    pub action: Action,
    pub logits: [f64; 6],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub world_seed: u64,
    pub start: Pose,
    pub target: String,
    pub success: bool,
    /// Value estimate of the state after the last step when the episode was
    /// truncated, 0 when it ended with `Done`.
    pub bootstrap_value: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn terminated(&self) -> bool {
        self.steps.last().is_some_and(|s| s.done)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }
}

/// Parameters a rollout acts with.
#[derive(Debug, Clone, Copy)]
pub struct Policy<'a> {
    pub network: &'a Network,
    pub params: &'a ParamStore,
}

/// Graph handles recorded during a rollout, ready for the loss.
pub struct Recording {
    pub graph: Graph,
    pub params: Vec<Var>,
    pub logits: Vec<Var>,
    pub values: Vec<Var>,
}

fn log_softmax_value(logits: &[f64; 6], a: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[a] - lse
}

#[allow(clippy::too_many_arguments)]
fn rollout_inner(
    ctx: &EpisodeContext,
    start: Pose,
    policy: Policy,
    reward_fn: &mut dyn RewardFn,
    max_steps: usize,
    mode: ActMode,
    rng: &mut ChaCha8Rng,
    trainable: bool,
) -> Result<(Trajectory, Recording)> {
    let net = policy.network;
    let mut g = Graph::new();
    let params = if trainable {
        policy.params.bind(&mut g)
    } else {
        policy.params.bind_frozen(&mut g)
    };
    let (h0, c0) = net.initial_hidden();
    let (mut h, mut c) = (g.constant(h0), g.constant(c0));
    let mut pose = start;
    let mut steps = Vec::new();
    let (mut logits_vars, mut value_vars) = (Vec::new(), Vec::new());
    let mut success = false;
    reward_fn.begin();
    for _ in 0..max_steps {
        let observation = ctx.observe(net.kind(), &pose)?;
        let out = net.forward(&mut g, &params, &observation, h, c)?;
        let values = step_output(&g, &out);
        let action = act(&values.logits, mode, rng);
        let visible: Vec<&str> = visible_objects(ctx.world, &pose)
            .into_iter()
            .map(|(o, _)| o.class_name.as_str())
            .collect();
        let reward = reward_fn.reward(action, ctx.target, &visible)?;
        let done = action == Action::Done;
        if done {
            success = success_check(ctx.world, &pose, ctx.target);
        }
        steps.push(TrajectoryStep {
            observation,
            pose,
            action,
            logits: values.logits,
            log_prob: log_softmax_value(&values.logits, action.index()),
            value: values.value,
            reward,
            done,
        });
        logits_vars.push(out.logits);
        value_vars.push(out.value);
        (h, c) = (out.h, out.c);
        if done {
            break;
        }
        pose = step(ctx.world, pose, action).0;
    }
    let truncated = !steps.last().is_some_and(|s: &TrajectoryStep| s.done);
    let bootstrap_value = if truncated && net.kind() != ModelKind::Random {
        let observation = ctx.observe(net.kind(), &pose)?;
        let out = net.forward(&mut g, &params, &observation, h, c)?;
        g.value(out.value).item()
    } else {
        0.0
    };
    let trajectory = Trajectory {
        steps,
        world_seed: ctx.world.seed,
        start,
        target: ctx.target.to_string(),
        success,
        bootstrap_value,
    };
    Ok((
        trajectory,
        Recording {
            graph: g,
            params,
            logits: logits_vars,
            values: value_vars,
        },
    ))
}

/// Runs one episode with sampled actions until `Done` or `max_steps`.
pub fn rollout(
    ctx: &EpisodeContext,
    start: Pose,
    policy: Policy,
    reward_fn: &mut dyn RewardFn,
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    Ok(rollout_inner(ctx, start, policy, reward_fn, max_steps, ActMode::Sample, rng, false)?.0)
}

/// Runs one episode in the given action mode without recording gradients.
pub fn run_episode(
    ctx: &EpisodeContext,
    start: Pose,
    policy: Policy,
    reward_fn: &mut dyn RewardFn,
    max_steps: usize,
    mode: ActMode,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    Ok(rollout_inner(ctx, start, policy, reward_fn, max_steps, mode, rng, false)?.0)
}

/// Re-runs the network over a recorded trajectory's observations with
/// trainable parameters, reproducing its logits and values on a new graph.
pub fn replay(network: &Network, params: &ParamStore, traj: &Trajectory) -> Result<Recording> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let (h0, c0) = network.initial_hidden();
    let (mut h, mut c) = (g.constant(h0), g.constant(c0));
    let (mut logits, mut values) = (Vec::new(), Vec::new());
    for s in &traj.steps {
        let out = network.forward(&mut g, &vars, &s.observation, h, c)?;
        logits.push(out.logits);
        values.push(out.value);
        (h, c) = (out.h, out.c);
    }
    Ok(Recording {
        graph: g,
        params: vars,
        logits,
        values,
    })
}

/// `R_t = r_t + gamma * R_{t+1}` with `R_T = bootstrap`.
pub fn discounted_returns(rewards: &[f64], gamma: f64, bootstrap: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub gamma: f64,
    pub entropy_weight: f64,
    pub value_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Builds `sum_t -log pi(a_t) A_t + w_v (R_t - V_t)^2 - beta H_t` on `g`.
/// Advantages enter as constants: `R_t - V_t` from the current values
/// unless given explicitly.
pub fn build_loss(
    g: &mut Graph,
    logits: &[Var],
    values: &[Var],
    actions: &[Action],
    returns: &[f64],
    advantages: Option<&[f64]>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if logits.is_empty() {
        return Err(TrainError::EmptyTrajectory);
    }
    let mut terms = Vec::with_capacity(logits.len());
    let mut parts = LossBreakdown {
        policy: 0.0,
        value: 0.0,
        entropy: 0.0,
        total: 0.0,
    };
    for t in 0..logits.len() {
        let advantage = match advantages {
            Some(a) => a[t],
            None => returns[t] - g.value(values[t]).item(),
        };
        let logp_all = g.log_softmax(logits[t], 1)?;
        let logp = g.pick(logp_all, actions[t].index())?;
        let policy_term = g.scale(logp, -advantage);

        let diff = g.add_scalar(values[t], -returns[t]);
        let sq = g.mul(diff, diff)?;
        let value_term = g.scale(sq, w.value_weight);
        let value_term = g.sum(value_term);

        let p = g.exp(logp_all);
        let plogp = g.mul(p, logp_all)?;
        let neg_entropy = g.sum(plogp);
        let entropy_term = g.scale(neg_entropy, w.entropy_weight);

        parts.policy += g.value(policy_term).item();
        parts.value += g.value(value_term).item();
        parts.entropy += -g.value(neg_entropy).item();

        let a = g.add(policy_term, value_term)?;
        terms.push(g.add(a, entropy_term)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    parts.total = g.value(total).item();
    Ok((total, parts))
}

/// Loss of a recorded trajectory evaluated from its stored logits and values.
pub fn compute_losses(traj: &Trajectory, w: &LossWeights) -> Result<LossBreakdown> {
    if traj.is_empty() {
        return Err(TrainError::EmptyTrajectory);
    }
    let mut g = Graph::new();
    let logits: Vec<Var> = traj
        .steps
        .iter()
        .map(|s| g.constant(Tensor::row(s.logits.to_vec())))
        .collect();
    let values: Vec<Var> = traj
        .steps
        .iter()
        .map(|s| g.constant(Tensor::matrix(1, 1, vec![s.value]).unwrap()))
        .collect();
    let actions: Vec<Action> = traj.steps.iter().map(|s| s.action).collect();
    let returns = discounted_returns(&traj.rewards(), w.gamma, traj.bootstrap_value);
    Ok(build_loss(&mut g, &logits, &values, &actions, &returns, None, w)?.1)
}

/// One sampled training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub world_index: usize,
    pub start: Pose,
    pub target: String,
}

/// Generates the world pool for `stream` (`"train-world"` or `"test-world"`).
pub fn world_pool(
    master: u64,
    stream: &str,
    count: usize,
    spec: &WorldSpec,
    split: &ClassSplit,
    table: &EmbeddingTable,
) -> Result<Vec<GridWorld>> {
    (0..count)
        .map(|i| Ok(gen_world(derive_seed(master, stream, i as u64), spec, split, table)?))
        .collect()
}

/// Random-access source of training episodes.
pub trait EpisodeSource: Sync {
    fn episode(&self, index: u64) -> EpisodeSpec;
}

/// Deterministic random-access stream of training episodes over a fixed
/// world pool. Targets are uniform over the seen classes present in the
/// chosen world; starts are uniform over free cells and headings, tilt 0.
#[derive(Debug, Clone)]
pub struct CurriculumSampler {
    seed: u64,
    targets: Vec<Vec<String>>,
    free: Vec<Vec<(i32, i32)>>,
}

impl CurriculumSampler {
    pub fn new(seed: u64, worlds: &[GridWorld], split: &ClassSplit) -> Result<Self> {
        if worlds.is_empty() {
            return Err(TrainError::Config("empty training world pool".into()));
        }
        let mut targets = Vec::new();
        let mut free = Vec::new();
        for w in worlds {
            let seen: Vec<String> = w
                .classes_present()
                .into_iter()
                .filter(|c| split.role(c) == Some(ClassRole::Seen))
                .map(str::to_string)
                .collect();
            if seen.is_empty() {
                return Err(WorldError::Infeasible(format!("world {} has no seen class", w.seed)).into());
            }
            targets.push(seen);
            free.push(w.free_cells().collect());
        }
        Ok(Self { seed, targets, free })
    }

    pub fn stream(&self, n: usize) -> impl Iterator<Item = EpisodeSpec> + '_ {
        (0..n as u64).map(|i| self.episode(i))
    }
}

impl EpisodeSource for CurriculumSampler {
    fn episode(&self, index: u64) -> EpisodeSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "curriculum", index));
        let world_index = rng.gen_range(0..self.targets.len());
        let targets = &self.targets[world_index];
        let target = targets[rng.gen_range(0..targets.len())].clone();
        let cells = &self.free[world_index];
        let (x, y) = cells[rng.gen_range(0..cells.len())];
        let heading = rng.gen_range(0..8u8);
        EpisodeSpec {
            world_index,
            start: Pose::new(x, y, heading, 0),
            target,
        }
    }
}

/// Summary of one training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub world_seed: u64,
    pub target: String,
    pub steps: usize,
    pub total_reward: f64,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub moving_avg_return: f64,
    pub moving_avg_success: f64,
    pub wall_seconds: f64,
    pub param_version: u64,
}

pub const LOG_COLUMNS: &str = "episode,moving_avg_return,moving_avg_success,wall_seconds,param_version";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub header: Vec<(String, String)>,
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# ssnav training log\n");
        for (k, v) in &self.header {
            writeln!(out, "# {k} = {v}").unwrap();
        }
        out.push_str(LOG_COLUMNS);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.3},{}",
                r.episode, r.moving_avg_return, r.moving_avg_success, r.wall_seconds, r.param_version
            )
            .unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut log = TrainingLog::default();
        let err = |line: usize, msg: &str| TrainError::Log {
            line,
            msg: msg.to_string(),
        };
        let mut seen_columns = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some((k, v)) = rest.split_once(" = ") {
                    log.header.push((k.to_string(), v.to_string()));
                }
                continue;
            }
            if line == LOG_COLUMNS {
                seen_columns = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if !seen_columns {
                return Err(err(n, "row before column header"));
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(n, "expected 5 columns"));
            }
            let p = |s: &str| s.parse::<f64>().map_err(|_| err(n, "bad number"));
            log.rows.push(LogRow {
                episode: f[0].parse().map_err(|_| err(n, "bad episode"))?,
                moving_avg_return: p(f[1])?,
                moving_avg_success: p(f[2])?,
                wall_seconds: p(f[3])?,
                param_version: f[4].parse().map_err(|_| err(n, "bad version"))?,
            });
        }
        if !seen_columns {
            return Err(err(0, "missing column header"));
        }
        Ok(log)
    }
}

pub fn episodes_to_csv(episodes: &[EpisodeSummary]) -> String {
    let mut out = String::from("episode,world_seed,target,steps,total_reward,success\n");
    for e in episodes {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.episode, e.world_seed, e.target, e.steps, e.total_reward, e.success as u8
        )
        .unwrap();
    }
    out
}

pub struct TrainOutcome {
    pub network: Network,
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
    pub episodes: Vec<EpisodeSummary>,
}

/// Fresh network and parameters for a config.
pub fn init_network(config: &TrainConfig, table: &EmbeddingTable) -> Result<(Network, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init", 0));
    Ok(Network::new(
        config.model.clone(),
        config.split.num_model_classes(),
        table.dim(),
        &mut rng,
    )?)
}

struct EpisodeWork {
    summary: EpisodeSummary,
    grads: Vec<Tensor>,
}

fn train_episode(
    config: &TrainConfig,
    table: &EmbeddingTable,
    worlds: &[GridWorld],
    sampler: &dyn EpisodeSource,
    network: &Network,
    params: &ParamStore,
    index: usize,
) -> Result<EpisodeWork> {
    let spec = sampler.episode(index as u64);
    let world = &worlds[spec.world_index];
    let ctx = EpisodeContext::new(world, &config.split, table, &spec.target)?;
    let mut reward_fn = SemanticRewardFn::new(&config.split, table, config.reward);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "rollout", index as u64));
    let policy = Policy { network, params };
    let (traj, mut rec) = rollout_inner(
        &ctx,
        spec.start,
        policy,
        &mut reward_fn,
        config.max_steps,
        ActMode::Sample,
        &mut rng,
        true,
    )?;
    let weights = LossWeights {
        gamma: config.gamma,
        entropy_weight: config.entropy_weight,
        value_weight: config.value_weight,
    };
    let returns = discounted_returns(&traj.rewards(), config.gamma, traj.bootstrap_value);
    let actions: Vec<Action> = traj.steps.iter().map(|s| s.action).collect();
    let (loss, _) = build_loss(&mut rec.graph, &rec.logits, &rec.values, &actions, &returns, None, &weights)?;
    let grads = rec.graph.backward(loss)?;
    let mut grads: Vec<Tensor> = rec.params.iter().map(|&v| grads.tensor(&rec.graph, v)).collect();
    if let Some(max) = config.grad_clip {
        clip_global_norm(&mut grads, max);
    }
    Ok(EpisodeWork {
        summary: EpisodeSummary {
            episode: index,
            world_seed: world.seed,
            target: traj.target.clone(),
            steps: traj.len(),
            total_reward: traj.total_reward(),
            success: traj.success,
        },
        grads,
    })
}

struct LogState {
    window: VecDeque<(f64, bool)>,
    interval: usize,
    completed: usize,
    rows: Vec<LogRow>,
    episodes: Vec<EpisodeSummary>,
}

impl LogState {
    fn new(interval: usize) -> Self {
        Self {
            window: VecDeque::new(),
            interval,
            completed: 0,
            rows: Vec::new(),
            episodes: Vec::new(),
        }
    }

    fn record(&mut self, summary: EpisodeSummary, total: usize, seconds: f64, version: u64) {
        if self.window.len() == self.interval {
            self.window.pop_front();
        }
        self.window.push_back((summary.total_reward, summary.success));
        self.episodes.push(summary);
        self.completed += 1;
        if self.completed.is_multiple_of(self.interval) || self.completed == total {
            let n = self.window.len() as f64;
            self.rows.push(LogRow {
                episode: self.completed,
                moving_avg_return: self.window.iter().map(|w| w.0).sum::<f64>() / n,
                moving_avg_success: self.window.iter().filter(|w| w.1).count() as f64 / n,
                wall_seconds: seconds,
                param_version: version,
            });
        }
    }
}

/// Trains a policy on a fixed world pool with the curriculum sampler.
pub fn train(config: &TrainConfig, table: &EmbeddingTable, worlds: &[GridWorld]) -> Result<TrainOutcome> {
    let sampler = CurriculumSampler::new(config.seed, worlds, &config.split)?;
    train_with(config, table, worlds, &sampler)
}

/// Trains a policy on episodes drawn from `source`.
pub fn train_with(
    config: &TrainConfig,
    table: &EmbeddingTable,
    worlds: &[GridWorld],
    source: &dyn EpisodeSource,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (network, params) = init_network(config, table)?;
    network.check_split(&config.split)?;
    let sampler = source;
    let optimizer = Optimizer::new(config.optimizer, &params);
    let clock = Instant::now();
    let seconds = || {
        if config.wall_clock {
            clock.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let total = config.episodes_total;
    let mut log = LogState::new(config.log_interval);

    let (params, optimizer) = if config.n_workers == 1 {
        let (mut params, mut optimizer) = (params, optimizer);
        for i in 0..total {
            let work = train_episode(config, table, worlds, sampler, &network, &params, i)?;
            optimizer.apply_update(&mut params, &work.grads, config.lr)?;
            log.record(work.summary, total, seconds(), params.version());
        }
        (params, optimizer)
    } else {
        struct Shared {
            params: ParamStore,
            optimizer: Optimizer,
            next: usize,
            error: Option<TrainError>,
        }
        let shared = Mutex::new(Shared {
            params,
            optimizer,
            next: 0,
            error: None,
        });
        let (tx, rx) = mpsc::channel::<(EpisodeSummary, u64)>();
        std::thread::scope(|s| {
            for _ in 0..config.n_workers {
                let tx = tx.clone();
                let (shared, network) = (&shared, &network);
                s.spawn(move || loop {
                    let (index, snapshot) = {
                        let mut sh = shared.lock().unwrap();
                        if sh.next >= total || sh.error.is_some() {
                            return;
                        }
                        sh.next += 1;
                        (sh.next - 1, sh.params.snapshot())
                    };
                    match train_episode(config, table, worlds, sampler, network, &snapshot, index) {
                        Ok(work) => {
                            let version = {
                                let mut sh = shared.lock().unwrap();
                                let Shared { params, optimizer, .. } = &mut *sh;
                                if let Err(e) = optimizer.apply_update(params, &work.grads, config.lr) {
                                    sh.error = Some(e.into());
                                    return;
                                }
                                sh.params.version()
                            };
                            if tx.send((work.summary, version)).is_err() {
                                return;
                            }
                        }
                        Err(e) => {
                            shared.lock().unwrap().error = Some(e);
                            return;
                        }
                    }
                });
            }
            drop(tx);
            for (summary, version) in rx {
                log.record(summary, total, seconds(), version);
            }
        });
        let sh = shared.into_inner().unwrap();
        if let Some(e) = sh.error {
            return Err(e);
        }
        (sh.params, sh.optimizer)
    };

    let mut meta = network.to_meta();
    meta.insert("partial_reward".into(), config.reward.partial_reward_enabled.to_string());
    meta.insert("seed".into(), config.seed.to_string());
    meta.insert("episodes".into(), total.to_string());
    let checkpoint = Checkpoint {
        meta,
        params,
        optimizer: Some(optimizer),
    };
    Ok(TrainOutcome {
        network,
        checkpoint,
        log: TrainingLog {
            header: config.header(),
            rows: log.rows,
        },
        episodes: log.episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::synth_embeddings;
    use crate::testutil::{small_split, small_table};
    use crate::world::PlacedObject;
    use proptest::prelude::{prop_assert, proptest};

    fn weights(gamma: f64, beta: f64, vw: f64) -> LossWeights {
        LossWeights {
            gamma,
            entropy_weight: beta,
            value_weight: vw,
        }
    }

    fn fake_step(logits: [f64; 6], action: Action, value: f64, reward: f64) -> TrajectoryStep {
        TrajectoryStep {
            observation: Observation::Blind,
            pose: Pose::new(0, 0, 0, 0),
            action,
            logits,
            log_prob: log_softmax_value(&logits, action.index()),
            value,
            reward,
            done: false,
        }
    }

    fn fake_traj(steps: Vec<TrajectoryStep>) -> Trajectory {
        Trajectory {
            steps,
            world_seed: 0,
            start: Pose::new(0, 0, 0, 0),
            target: "t".into(),
            success: false,
            bootstrap_value: 0.0,
        }
    }

    #[test]
    fn single_step_loss_arithmetic() {
        let traj = fake_traj(vec![fake_step([0.0; 6], Action::Done, 0.0, 5.0)]);
        let l = compute_losses(&traj, &weights(0.3, 0.0, 0.5)).unwrap();
        assert_eq!(l.value, 12.5);
        let logp = -(6f64).ln();
        assert!((l.policy - (-logp * 5.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_rewards_leave_only_entropy() {
        let logits = [0.3, -0.2, 0.1, 0.0, 0.5, -1.0];
        let traj = fake_traj(vec![
            fake_step(logits, Action::MoveAhead, 0.0, 0.0),
            fake_step(logits, Action::LookUp, 0.0, 0.0),
        ]);
        let beta = 0.01;
        let l = compute_losses(&traj, &weights(0.99, beta, 0.5)).unwrap();
        assert_eq!(l.policy, 0.0);
        assert_eq!(l.value, 0.0);
        assert!((l.total + beta * l.entropy).abs() < 1e-15);
        assert!(compute_losses(&fake_traj(vec![]), &weights(0.99, beta, 0.5)).is_err());
    }

    #[test]
    fn hand_discounting() {
        assert_eq!(discounted_returns(&[0.0, 1.0], 0.5, 0.0), vec![0.5, 1.0]);
        assert_eq!(discounted_returns(&[1.0], 0.5, 2.0), vec![2.0]);
    }

    proptest! {
        #[test]
        fn returns_satisfy_recurrence(
            rewards in proptest::collection::vec(-5.0f64..5.0, 1..40),
            gamma in 0.01f64..=1.0,
            boot in -3.0f64..3.0,
        ) {
            let r = discounted_returns(&rewards, gamma, boot);
            let n = rewards.len();
            prop_assert!((r[n - 1] - (rewards[n - 1] + gamma * boot)).abs() < 1e-12);
            for t in 0..n - 1 {
                prop_assert!((r[t] - (rewards[t] + gamma * r[t + 1])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn entropy_gradient_vanishes_at_uniform_logits() {
        let neg_entropy = |l: &[f64; 6]| {
            let traj = fake_traj(vec![fake_step(*l, Action::MoveAhead, 0.0, 0.0)]);
            -compute_losses(&traj, &weights(0.9, 1.0, 0.0)).unwrap().entropy
        };
        let h = 1e-5;
        for i in 0..6 {
            let mut up = [0.2; 6];
            let mut down = [0.2; 6];
            up[i] += h;
            down[i] -= h;
            let fd = (neg_entropy(&up) - neg_entropy(&down)) / (2.0 * h);
            assert!(fd.abs() < 1e-9, "coordinate {i}: {fd}");
        }
        // The analytic graph gradient agrees.
        let mut g = Graph::new();
        let logits = g.param(Tensor::row(vec![0.2; 6]));
        let value = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let (loss, _) = build_loss(&mut g, &[logits], &[value], &[Action::MoveAhead], &[0.0], None, &weights(0.9, 1.0, 0.0)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(logits).unwrap().iter().all(|x| x.abs() < 1e-15));
    }

    /// A 3x3 world with the target one cell ahead of a fixed start.
    fn tiny_world() -> (ClassSplit, EmbeddingTable, GridWorld) {
        let split = ClassSplit::new(&["t"], &[], &["x"]).unwrap();
        let table = synth_embeddings(3, &["t", "x"], 4, &[0, 1]).unwrap();
        let world = GridWorld::new(
            3,
            3,
            &[],
            vec![PlacedObject {
                class_name: "t".into(),
                x: 1,
                y: 2,
                height_band: 0,
                size: 0.8,
            }],
            "tiny",
            0,
        )
        .unwrap();
        (split, table, world)
    }

    #[test]
    fn immediate_done_next_to_target() {
        let (split, table, world) = tiny_world();
        let cfg = ModelConfig {
            kind: ModelKind::SsNet,
            ..ModelConfig::default()
        };
        let (net, mut params) = Network::new(cfg, 2, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // Force Done by biasing the actor head.
        let b = params.get_mut("actor.b").unwrap();
        b.data_mut()[Action::Done.index()] = 100.0;
        let ctx = EpisodeContext::new(&world, &split, &table, "t").unwrap();
        let mut reward = SemanticRewardFn::new(&split, &table, RewardConfig::default());
        let traj = rollout(
            &ctx,
            Pose::new(1, 1, 0, 0),
            Policy {
                network: &net,
                params: &params,
            },
            &mut reward,
            50,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.steps[0].reward, 5.0);
        assert!(traj.success && traj.terminated());
        assert_eq!(traj.bootstrap_value, 0.0);
    }

    #[test]
    fn truncation_and_determinism() {
        let (split, table) = (small_split(), small_table());
        let worlds = world_pool(5, "train-world", 1, &WorldSpec::default(), &split, &table).unwrap();
        let (net, params) = Network::new(ModelConfig::default(), 4, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ctx = EpisodeContext::new(&worlds[0], &split, &table, "s1").unwrap();
        let start = Pose::new(
            worlds[0].free_cells().next().unwrap().0,
            worlds[0].free_cells().next().unwrap().1,
            0,
            0,
        );
        let run = |seed| {
            let mut reward = SemanticRewardFn::new(&split, &table, RewardConfig::default());
            // With Done never chosen greedily the episode hits the cap.
            let mut p = params.clone();
            p.get_mut("actor.b").unwrap().data_mut()[Action::Done.index()] = -100.0;
            let policy = Policy {
                network: &net,
                params: &p,
            };
            rollout(&ctx, start, policy, &mut reward, 7, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        let a = run(3);
        assert_eq!(a.len(), 7);
        assert!(!a.success && !a.terminated());
        assert_ne!(a.bootstrap_value, 0.0);
        assert_eq!(a, run(3));
    }

    fn tiny_config(split: ClassSplit, episodes: usize) -> TrainConfig {
        TrainConfig {
            episodes_total: episodes,
            max_steps: 10,
            lr: 1e-2,
            log_interval: 50,
            wall_clock: false,
            n_train_worlds: 1,
            model: ModelConfig {
                hidden: 16,
                ..ModelConfig::default()
            },
            ..TrainConfig::new(split)
        }
    }

    fn tiny_train(cfg: &TrainConfig, table: &EmbeddingTable, world: &GridWorld) -> TrainOutcome {
        train(cfg, table, std::slice::from_ref(world)).unwrap()
    }

    fn corridor() -> (ClassSplit, EmbeddingTable, GridWorld) {
        let (split, table, _) = tiny_world();
        // Free cells are the start (1, 1) and the target cell just ahead.
        let walls: Vec<(i32, i32)> = (0..3)
            .flat_map(|x| (0..3).map(move |y| (x, y)))
            .filter(|&c| c != (1, 1) && c != (1, 2))
            .collect();
        let world = GridWorld::new(
            3,
            3,
            &walls,
            vec![PlacedObject {
                class_name: "t".into(),
                x: 1,
                y: 2,
                height_band: 0,
                size: 0.8,
            }],
            "tiny",
            0,
        )
        .unwrap();
        (split, table, world)
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let (split, table) = (small_split(), small_table());
        let worlds = world_pool(2, "train-world", 1, &WorldSpec::default(), &split, &table).unwrap();
        let cfg = tiny_config(split.clone(), 1);
        let (net, params) = init_network(&cfg, &table).unwrap();
        let ctx = EpisodeContext::new(&worlds[0], &split, &table, "s1").unwrap();
        let (x, y) = worlds[0].free_cells().nth(3).unwrap();
        let mut rf = SemanticRewardFn::new(&split, &table, cfg.reward);
        let policy = Policy {
            network: &net,
            params: &params,
        };
        let traj = rollout(&ctx, Pose::new(x, y, 2, 0), policy, &mut rf, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let w = weights(0.9, 0.01, 0.5);
        let returns = discounted_returns(&traj.rewards(), w.gamma, traj.bootstrap_value);
        let adv: Vec<f64> = returns.iter().zip(&traj.steps).map(|(r, s)| r - s.value).collect();
        let actions: Vec<Action> = traj.steps.iter().map(|s| s.action).collect();
        let loss_at = |p: &ParamStore| {
            let mut rec = replay(&net, p, &traj).unwrap();
            let (l, _) = build_loss(&mut rec.graph, &rec.logits, &rec.values, &actions, &returns, Some(&adv), &w).unwrap();
            (rec, l)
        };
        let (rec, l) = loss_at(&params);
        let grads = rec.graph.backward(l).unwrap();
        let mut pick = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for (i, &v) in rec.params.iter().enumerate() {
            let analytic = grads.tensor(&rec.graph, v);
            for _ in 0..4 {
                let j = pick.gen_range(0..analytic.len());
                let mut up = params.clone();
                let mut down = params.clone();
                let name = params.by_index(i).0.to_string();
                up.get_mut(&name).unwrap().data_mut()[j] += h;
                down.get_mut(&name).unwrap().data_mut()[j] -= h;
                let f = |p: &ParamStore| {
                    let (rec, l) = loss_at(p);
                    rec.graph.value(l).item()
                };
                let numeric = (f(&up) - f(&down)) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{j}]: analytic {a} numeric {numeric}");
            }
        }
    }

    struct FixedStart(Pose);

    impl EpisodeSource for FixedStart {
        fn episode(&self, _: u64) -> EpisodeSpec {
            EpisodeSpec {
                world_index: 0,
                start: self.0,
                target: "t".into(),
            }
        }
    }

    fn open_room() -> (ClassSplit, EmbeddingTable, GridWorld) {
        let (split, table, _) = tiny_world();
        let world = GridWorld::new(
            3,
            3,
            &[],
            vec![PlacedObject {
                class_name: "t".into(),
                x: 1,
                y: 1,
                height_band: 0,
                size: 0.8,
            }],
            "tiny",
            0,
        )
        .unwrap();
        (split, table, world)
    }

    #[test]
    fn contrived_world_is_learned() {
        let (split, table, world) = open_room();
        let start = Pose::new(1, 0, 0, 0);
        let out = train_with(
            &tiny_config(split.clone(), 2000),
            &table,
            std::slice::from_ref(&world),
            &FixedStart(start),
        )
        .unwrap();
        let best = out.log.rows.iter().map(|r| r.moving_avg_success).fold(0.0, f64::max);
        assert!(best >= 0.95, "{:?}", out.log.rows);
        let ctx = EpisodeContext::new(&world, &split, &table, "t").unwrap();
        let policy = Policy {
            network: &out.network,
            params: &out.checkpoint.params,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let greedy = run_episode(&ctx, start, policy, &mut NoReward, 10, ActMode::Greedy, &mut rng).unwrap();
        assert!(greedy.success);
    }

    #[test]
    fn sync_training_is_bit_exact_and_zero_episodes_is_init() {
        let (split, table, world) = corridor();
        let cfg = tiny_config(split, 30);
        let a = tiny_train(&cfg, &table, &world);
        let b = tiny_train(&cfg, &table, &world);
        assert_eq!(a.checkpoint.to_text(), b.checkpoint.to_text());
        assert_eq!(a.log.to_text(), b.log.to_text());

        let zero = TrainConfig {
            episodes_total: 0,
            ..cfg.clone()
        };
        let z = tiny_train(&zero, &table, &world);
        let (_, init) = init_network(&cfg, &table).unwrap();
        assert_eq!(z.checkpoint.params, init);
        assert!(z.log.rows.is_empty());
    }

    #[test]
    fn async_training_runs_all_episodes() {
        let (split, table, world) = corridor();
        let cfg = TrainConfig {
            n_workers: 3,
            ..tiny_config(split, 60)
        };
        let out = tiny_train(&cfg, &table, &world);
        assert_eq!(out.episodes.len(), 60);
        assert_eq!(out.checkpoint.params.version(), 60);
        let mut ids: Vec<usize> = out.episodes.iter().map(|e| e.episode).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..60).collect::<Vec<_>>());
    }

    #[test]
    fn curriculum_stream() {
        let (split, table) = (small_split(), small_table());
        let spec = WorldSpec {
            objects_per_class: (1, 2),
            ..WorldSpec::default()
        };
        let worlds = world_pool(9, "train-world", 4, &spec, &split, &table).unwrap();
        let s = CurriculumSampler::new(11, &worlds, &split).unwrap();
        let a: Vec<_> = s.stream(50).collect();
        let b: Vec<_> = CurriculumSampler::new(11, &worlds, &split).unwrap().stream(50).collect();
        assert_eq!(a, b);
        let mut hit = std::collections::BTreeSet::new();
        for e in s.stream(10_000) {
            assert_eq!(split.role(&e.target), Some(ClassRole::Seen));
            assert_eq!(e.start.tilt, 0);
            assert!(worlds[e.world_index].is_free(e.start.x, e.start.y));
            hit.insert(e.target);
        }
        let present: std::collections::BTreeSet<String> = worlds
            .iter()
            .flat_map(|w| w.classes_present())
            .filter(|c| split.role(c) == Some(ClassRole::Seen))
            .map(str::to_string)
            .collect();
        assert_eq!(hit, present);
    }

    #[test]
    fn training_log_round_trip_and_audit() {
        let (split, table, world) = corridor();
        let out = tiny_train(&tiny_config(split.clone(), 120), &table, &world);
        let text = out.log.to_text();
        assert!(text.contains("# gamma = 0.99"));
        assert_eq!(TrainingLog::from_text(&text).unwrap(), out.log);
        assert!(out.episodes.iter().all(|e| split.role(&e.target) == Some(ClassRole::Seen)));
        assert_eq!(out.log.rows.iter().map(|r| r.episode).collect::<Vec<_>>(), vec![50, 100, 120]);
    }

    #[test]
    fn config_validation() {
        let base = TrainConfig::new(small_split());
        assert!(base.validate().is_ok());
        for bad in [
            TrainConfig { gamma: 0.0, ..base.clone() },
            TrainConfig { gamma: 1.5, ..base.clone() },
            TrainConfig { max_steps: 0, ..base.clone() },
            TrainConfig { lr: 0.0, ..base.clone() },
            TrainConfig { n_workers: 0, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
    }
}
