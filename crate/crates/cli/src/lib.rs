//! `ssnav` command-line driver: world and embedding generation, training,
//! evaluation, ablations and episode replay. All file output goes through
//! this crate.

pub mod manifest;
pub mod replay;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use ssnav_core::config::ExperimentConfig;
use ssnav_core::eval::{episode_log_to_text, report, run_eval, EpisodeResult, MetricsReport, TargetGroup};
use ssnav_core::model::{random_network, ActMode, ModelKind, Network};
use ssnav_core::seeds::derive_seed;
use ssnav_core::semantic::{ClassSplit, EmbeddingTable};
use ssnav_core::training::{episodes_to_csv, train, TrainOutcome};
use ssnav_core::world::{gen_world, GridWorld};
use ssnav_tensor::{Checkpoint, ParamStore};

use manifest::{Entry, Manifest, Pool};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_ECHO: &str = "config.txt";
pub const CONFIG_SOURCE: &str = "config.source.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const TRAIN_EPISODES: &str = "train_episodes.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const EPISODE_LOG: &str = "episodes.log";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or malformed inputs, incompatible artifacts.
    #[error("{0}")]
    Config(String),
    /// Failure while running or writing results.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "ssnav", version, about = "Semantic-similarity object navigation in grid worlds")]
pub struct Cli {
    /// Worker threads for parallel evaluation (default: all cores).
    #[arg(long, global = true, env = "SSNAV_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test world pools and their manifest.
    GenWorlds(GenWorldsArgs),
    /// Write the embedding table a config resolves to.
    GenEmbeddings(GenEmbeddingsArgs),
    /// Train a policy and write its checkpoint and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the random baseline) on test worlds.
    Eval(EvalArgs),
    /// Train and evaluate the full model next to ablated variants.
    Ablate(AblateArgs),
    /// Render one logged evaluation episode step by step.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct OutDir {
    /// Output directory (created if missing).
    #[arg(long, short, env = "SSNAV_OUT_DIR", default_value = "ssnav-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenWorldsArgs {
    /// Experiment config holding the world spec and class split.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Total number of worlds [default: n_train_worlds + n_test_worlds].
    #[arg(long)]
    pub count: Option<usize>,
    /// How many of the worlds go to the train pool [default: min(n_train_worlds, count)].
    #[arg(long)]
    pub train: Option<usize>,
    /// Master seed [default: the config's seed].
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct GenEmbeddingsArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    /// World manifest; without one the train pool is generated from the config seed.
    #[arg(long, short)]
    pub manifest: Option<PathBuf>,
    /// Override episodes_total.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Override n_workers.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Override train_seed.
    #[arg(long)]
    pub train_seed: Option<u64>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupArg {
    Seen,
    Unseen,
    Both,
}

impl GroupArg {
    fn groups(self) -> Vec<TargetGroup> {
        match self {
            GroupArg::Seen => vec![TargetGroup::Seen],
            GroupArg::Unseen => vec![TargetGroup::Unseen],
            GroupArg::Both => vec![TargetGroup::Seen, TargetGroup::Unseen],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Greedy,
    Sample,
}

impl From<ModeArg> for ActMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Greedy => ActMode::Greedy,
            ModeArg::Sample => ActMode::Sample,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    /// Trained checkpoint; required unless --random.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the uniform random policy instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub random: bool,
    /// World manifest; without one the test pool is generated from the config seed.
    #[arg(long, short)]
    pub manifest: Option<PathBuf>,
    /// Override eval_episodes (per target group).
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Override eval_mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Override the evaluation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Which target groups to evaluate.
    #[arg(long, value_enum, default_value = "both")]
    pub group: GroupArg,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, short)]
    pub config: PathBuf,
    #[arg(long, short)]
    pub manifest: Option<PathBuf>,
    /// Add a variant without the self-attention module.
    #[arg(long)]
    pub no_self_attention: bool,
    /// Add a variant without partial reward (stacked on --no-self-attention when both are given).
    #[arg(long)]
    pub no_partial_reward: bool,
    /// Training seeds to average over [default: the config's train_seed].
    #[arg(long, value_delimiter = ',')]
    pub train_seeds: Vec<u64>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Config used for the evaluation (class split, embeddings, reward).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Episode log written by `eval`.
    #[arg(long)]
    pub log: PathBuf,
    /// Zero-based episode index in the log.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Manifest holding the episode's world; without one pools are regenerated from the config.
    #[arg(long, short)]
    pub manifest: Option<PathBuf>,
    /// Also write the rendering to this file.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

/// Runs a parsed command; returns text for stdout.
pub fn run(cli: Cli) -> Result<String> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(runtime_err)?;
    pool.install(|| match cli.command {
        Command::GenWorlds(a) => cmd_gen_worlds(&a),
        Command::GenEmbeddings(a) => cmd_gen_embeddings(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Replay(a) => cmd_replay(&a),
    })
}

/// Config, split and embeddings resolved from a config file.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub source: String,
    pub split: ClassSplit,
    pub table: EmbeddingTable,
}

pub fn load_config(path: &Path) -> Result<Loaded> {
    let source = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let config = ExperimentConfig::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let split = config.split().map_err(config_err)?;
    let table = config.embeddings().map_err(config_err)?;
    Ok(Loaded {
        config,
        source,
        split,
        table,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Writes the source config verbatim plus the full effective config.
fn echo_config(dir: &Path, loaded: &Loaded, effective: &ExperimentConfig) -> Result<()> {
    write(&dir.join(CONFIG_SOURCE), &loaded.source)?;
    write(&dir.join(CONFIG_ECHO), &effective.to_text())
}

fn world_file(pool: Pool, i: usize) -> PathBuf {
    PathBuf::from("worlds").join(format!("{}-{i:03}.world", pool.as_str()))
}

pub fn cmd_gen_worlds(a: &GenWorldsArgs) -> Result<String> {
    let loaded = load_config(&a.config)?;
    let mut cfg = loaded.config.clone();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let count = a.count.unwrap_or(cfg.n_train_worlds + cfg.n_test_worlds);
    let n_train = a.train.unwrap_or(cfg.n_train_worlds.min(count));
    if n_train > count {
        return Err(CliError::Config(format!("--train {n_train} exceeds --count {count}")));
    }
    cfg.n_train_worlds = n_train;
    cfg.n_test_worlds = count - n_train;
    let dir = &a.out.out;
    create_dir(&dir.join("worlds"))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (pool, stream, k) = if i < n_train {
            (Pool::Train, "train-world", i)
        } else {
            (Pool::Test, "test-world", i - n_train)
        };
        let seed = derive_seed(cfg.seed, stream, k as u64);
        let world = gen_world(seed, &cfg.world, &loaded.split, &loaded.table).map_err(config_err)?;
        let path = world_file(pool, k);
        world.save(&dir.join(&path)).map_err(runtime_err)?;
        entries.push(Entry { pool, seed, path });
    }
    let m = Manifest {
        seed: cfg.seed,
        entries,
    };
    m.check_disjoint().map_err(runtime_err)?;
    write(&dir.join(MANIFEST_FILE), &m.to_text())?;
    echo_config(dir, &loaded, &cfg)?;
    Ok(format!(
        "wrote {} train and {} test worlds to {}\n",
        n_train,
        count - n_train,
        dir.display()
    ))
}

pub fn cmd_gen_embeddings(a: &GenEmbeddingsArgs) -> Result<String> {
    let loaded = load_config(&a.config)?;
    let dir = &a.out.out;
    create_dir(dir)?;
    let path = dir.join(EMBEDDINGS_FILE);
    loaded.table.save(&path).map_err(runtime_err)?;
    echo_config(dir, &loaded, &loaded.config)?;
    Ok(format!(
        "wrote {} embeddings of dim {} to {}\n",
        loaded.table.len(),
        loaded.table.dim(),
        path.display()
    ))
}

/// Loads one pool: from the manifest when given, otherwise regenerated
/// from the config seed.
pub fn resolve_pool(loaded: &Loaded, manifest: Option<&Path>, pool: Pool) -> Result<Vec<GridWorld>> {
    match manifest {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let m = Manifest::from_text(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let dir = path.parent().unwrap_or(Path::new("."));
            m.load_pool(dir, pool).map_err(config_err)
        }
        None => {
            let cfg = &loaded.config;
            let (stream, count) = match pool {
                Pool::Train => ("train-world", cfg.n_train_worlds),
                Pool::Test => ("test-world", cfg.n_test_worlds),
            };
            (0..count)
                .map(|i| {
                    gen_world(
                        derive_seed(cfg.seed, stream, i as u64),
                        &cfg.world,
                        &loaded.split,
                        &loaded.table,
                    )
                    .map_err(config_err)
                })
                .collect()
        }
    }
}

fn train_and_write(loaded: &Loaded, cfg: &ExperimentConfig, worlds: &[GridWorld], dir: &Path) -> Result<TrainOutcome> {
    let tc = cfg.train_config().map_err(config_err)?;
    tc.validate().map_err(config_err)?;
    if worlds.is_empty() {
        return Err(CliError::Config("the train pool is empty".into()));
    }
    let outcome = train(&tc, &loaded.table, worlds).map_err(runtime_err)?;
    create_dir(dir)?;
    outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE)).map_err(runtime_err)?;
    write(&dir.join(TRAIN_LOG), &outcome.log.to_text())?;
    write(&dir.join(TRAIN_EPISODES), &episodes_to_csv(&outcome.episodes))?;
    echo_config(dir, loaded, cfg)?;
    Ok(outcome)
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let loaded = load_config(&a.config)?;
    let mut cfg = loaded.config.clone();
    if let Some(n) = a.episodes {
        cfg.episodes_total = n;
    }
    if let Some(n) = a.workers {
        cfg.n_workers = n;
    }
    if let Some(s) = a.train_seed {
        cfg.train_seed = s;
    }
    if cfg.model.kind == ModelKind::Random {
        return Err(CliError::Config("the random model has nothing to train".into()));
    }
    let worlds = resolve_pool(&loaded, a.manifest.as_deref(), Pool::Train)?;
    let outcome = train_and_write(&loaded, &cfg, &worlds, &a.out.out)?;
    let last = outcome.log.rows.last();
    Ok(format!(
        "trained {} episodes; final moving success {:.3}; checkpoint {}\n",
        outcome.episodes.len(),
        last.map_or(0.0, |r| r.moving_avg_success),
        a.out.out.join(CHECKPOINT_FILE).display()
    ))
}

/// Loads a checkpoint and checks it against the config's class split.
pub fn load_checkpoint(path: &Path, split: &ClassSplit) -> Result<(Network, ParamStore)> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let network =
        Network::from_meta(&ck.meta, &ck.params).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    network
        .check_split(split)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((network, ck.params))
}

fn evaluate(
    loaded: &Loaded,
    cfg: &ExperimentConfig,
    network: &Network,
    params: &ParamStore,
    worlds: &[GridWorld],
    groups: &[TargetGroup],
    dir: &Path,
) -> Result<MetricsReport> {
    let ec = cfg.eval_config();
    let mut results: Vec<EpisodeResult> = Vec::new();
    for &g in groups {
        results.extend(run_eval(network, params, &loaded.split, &loaded.table, worlds, g, &ec).map_err(runtime_err)?);
    }
    let rep = report(&results);
    create_dir(dir)?;
    write(&dir.join(REPORT_TXT), &rep.to_table())?;
    write(&dir.join(REPORT_CSV), &rep.to_csv())?;
    write(&dir.join(EPISODE_LOG), &episode_log_to_text(&results))?;
    echo_config(dir, loaded, cfg)?;
    Ok(rep)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let loaded = load_config(&a.config)?;
    let mut cfg = loaded.config.clone();
    if let Some(n) = a.episodes {
        cfg.eval_episodes = n;
    }
    if let Some(m) = a.mode {
        cfg.eval_mode = m.into();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (network, params) = match (&a.checkpoint, a.random) {
        (_, true) => {
            cfg.model.kind = ModelKind::Random;
            cfg.eval_mode = ActMode::Sample;
            random_network(loaded.split.num_model_classes(), loaded.table.dim()).map_err(config_err)?
        }
        (Some(path), false) => load_checkpoint(path, &loaded.split)?,
        (None, false) => return Err(CliError::Config("eval needs --checkpoint or --random".into())),
    };
    let worlds = resolve_pool(&loaded, a.manifest.as_deref(), Pool::Test)?;
    if worlds.is_empty() {
        return Err(CliError::Config("the test pool is empty".into()));
    }
    let rep = evaluate(&loaded, &cfg, &network, &params, &worlds, &a.group.groups(), &a.out.out)?;
    Ok(rep.to_table())
}

/// One ablation variant: name, self-attention, partial reward.
pub fn ablation_variants(no_sa: bool, no_pr: bool) -> Vec<(&'static str, bool, bool)> {
    let mut v = vec![("full", true, true)];
    match (no_sa, no_pr) {
        (true, true) => {
            v.push(("no-sa", false, true));
            v.push(("no-sa-no-pr", false, false));
        }
        (true, false) => v.push(("no-sa", false, true)),
        (false, true) => v.push(("no-pr", true, false)),
        (false, false) => {}
    }
    v
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<String> {
    let loaded = load_config(&a.config)?;
    if loaded.config.model.kind != ModelKind::SsNet {
        return Err(CliError::Config("ablations apply to the ssnet model".into()));
    }
    let train_worlds = resolve_pool(&loaded, a.manifest.as_deref(), Pool::Train)?;
    let test_worlds = resolve_pool(&loaded, a.manifest.as_deref(), Pool::Test)?;
    if test_worlds.is_empty() {
        return Err(CliError::Config("the test pool is empty".into()));
    }
    let seeds = if a.train_seeds.is_empty() {
        vec![loaded.config.train_seed]
    } else {
        a.train_seeds.clone()
    };
    let dir = &a.out.out;
    let mut summary = String::from("variant,SA,PR,train_seed,seen_SR,seen_SPL,unseen_SR,unseen_SPL\n");
    let mut table = format!(
        "{:<12} {:>3} {:>3} {:>10} {:>10} {:>10}\n",
        "variant", "SA", "PR", "seeds", "seen SR", "unseen SR"
    );
    let cell = |rep: &MetricsReport, g: &str| rep.get(g, 1).map_or((f64::NAN, f64::NAN), |c| (c.sr, c.spl));
    for (name, sa, pr) in ablation_variants(a.no_self_attention, a.no_partial_reward) {
        let (mut seen_sum, mut unseen_sum) = (0.0, 0.0);
        for &seed in &seeds {
            let mut cfg = loaded.config.clone();
            cfg.model.self_attention = sa;
            cfg.reward.partial_reward_enabled = pr;
            cfg.train_seed = seed;
            let run_dir = dir.join(name).join(format!("seed-{seed}"));
            let outcome = train_and_write(&loaded, &cfg, &train_worlds, &run_dir)?;
            let rep = evaluate(
                &loaded,
                &cfg,
                &outcome.network,
                &outcome.checkpoint.params,
                &test_worlds,
                &[TargetGroup::Seen, TargetGroup::Unseen],
                &run_dir,
            )?;
            let (s_sr, s_spl) = cell(&rep, "seen");
            let (u_sr, u_spl) = cell(&rep, "unseen");
            writeln!(summary, "{name},{sa},{pr},{seed},{s_sr:.2},{s_spl:.2},{u_sr:.2},{u_spl:.2}").unwrap();
            seen_sum += s_sr;
            unseen_sum += u_sr;
        }
        let n = seeds.len() as f64;
        writeln!(
            table,
            "{:<12} {:>3} {:>3} {:>10} {:>10.2} {:>10.2}",
            name,
            if sa { "yes" } else { "no" },
            if pr { "yes" } else { "no" },
            seeds.len(),
            seen_sum / n,
            unseen_sum / n
        )
        .unwrap();
    }
    create_dir(dir)?;
    write(&dir.join("ablation.csv"), &summary)?;
    write(&dir.join("ablation.txt"), &table)?;
    Ok(table)
}

pub fn cmd_replay(a: &ReplayArgs) -> Result<String> {
    let loaded = load_config(&a.config)?;
    let text = fs::read_to_string(&a.log).map_err(|e| CliError::Config(format!("{}: {e}", a.log.display())))?;
    let episodes = ssnav_core::eval::episode_log_from_text(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", a.log.display())))?;
    let ep = episodes.get(a.index).ok_or_else(|| {
        CliError::Config(format!("episode {} out of range ({} logged)", a.index, episodes.len()))
    })?;
    let mut worlds = resolve_pool(&loaded, a.manifest.as_deref(), Pool::Test)?;
    worlds.extend(resolve_pool(&loaded, a.manifest.as_deref(), Pool::Train)?);
    let world = worlds
        .iter()
        .find(|w| w.seed == ep.world_seed)
        .ok_or_else(|| CliError::Config(format!("no world with seed {} in the pools", ep.world_seed)))?;
    let rendering =
        replay::render_episode(world, ep, &loaded.split, &loaded.table, &loaded.config.reward).map_err(config_err)?;
    if let Some(path) = &a.save {
        write(path, &rendering)?;
    }
    Ok(rendering)
}
