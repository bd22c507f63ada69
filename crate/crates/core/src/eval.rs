//! Held-out evaluation: success rate, success weighted by path length,
//! optimal-length buckets and the seen/unseen report.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use ssnav_tensor::ParamStore;

use crate::model::{ActMode, EpisodeContext, ModelError, Network};
use crate::seeds::derive_seed;
use crate::semantic::{ClassRole, ClassSplit, EmbeddingTable};
use crate::training::{run_episode, NoReward, Policy, TrainError};
use crate::world::{shortest_path_length, Action, GridWorld, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("metric of an empty result list")]
    Empty,
    #[error("no evaluation world contains a reachable {0} target")]
    NoTargets(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("episode log line {line}: {msg}")]
    Format { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetGroup {
    Seen,
    Unseen,
}

impl TargetGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetGroup::Seen => "seen",
            TargetGroup::Unseen => "unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seen" => Some(TargetGroup::Seen),
            "unseen" => Some(TargetGroup::Unseen),
            _ => None,
        }
    }

    fn role(self) -> ClassRole {
        match self {
            TargetGroup::Seen => ClassRole::Seen,
            TargetGroup::Unseen => ClassRole::Unseen,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    /// Non-`Done` actions taken.
    pub path_len: usize,
    /// Shortest number of actions to a pose that sees the target.
    pub optimal_len: usize,
    pub target: String,
    pub group: TargetGroup,
    pub world_seed: u64,
    pub room_type: String,
    pub start: Pose,
    /// Action codes in order, for replay.
    pub actions: String,
}

pub const EPISODE_LOG_HEADER: &str = "ssnav-episodes v1";

impl EpisodeResult {
    pub fn to_line(&self) -> String {
        let s = &self.start;
        format!(
            "{} {} {} {} {} {} {} {} {} {} {} {}",
            self.group.as_str(),
            self.target,
            self.world_seed,
            self.room_type,
            s.x,
            s.y,
            s.heading,
            s.tilt,
            self.success as u8,
            self.path_len,
            self.optimal_len,
            if self.actions.is_empty() { "-" } else { &self.actions },
        )
    }

    pub fn from_line(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 12 {
            return Err(format!("expected 12 fields, got {}", f.len()));
        }
        let num = |i: usize| f[i].parse::<i64>().map_err(|_| format!("bad number `{}`", f[i]));
        let actions = if f[11] == "-" { String::new() } else { f[11].to_string() };
        if let Some(c) = actions.chars().find(|&c| Action::from_code(c).is_none()) {
            return Err(format!("bad action code `{c}`"));
        }
        let heading = num(6)?;
        let tilt = num(7)?;
        if !(0..8).contains(&heading) || !(-1..=1).contains(&tilt) {
            return Err("bad start pose".into());
        }
        Ok(Self {
            group: TargetGroup::parse(f[0]).ok_or_else(|| format!("bad group `{}`", f[0]))?,
            target: f[1].to_string(),
            world_seed: f[2].parse().map_err(|_| format!("bad seed `{}`", f[2]))?,
            room_type: f[3].to_string(),
            start: Pose::new(num(4)? as i32, num(5)? as i32, heading as u8, tilt as i8),
            success: match f[8] {
                "0" => false,
                "1" => true,
                other => return Err(format!("bad success flag `{other}`")),
            },
            path_len: num(9)? as usize,
            optimal_len: num(10)? as usize,
            actions,
        })
    }
}

pub fn episode_log_to_text(results: &[EpisodeResult]) -> String {
    let mut out = String::from(EPISODE_LOG_HEADER);
    out.push_str("\n# group target world_seed room_type x y heading tilt success path_len optimal_len actions\n");
    for r in results {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn episode_log_from_text(text: &str) -> Result<Vec<EpisodeResult>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == EPISODE_LOG_HEADER => {}
        _ => {
            return Err(EvalError::Format {
                line: 1,
                msg: format!("expected header `{EPISODE_LOG_HEADER}`"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .map(|(i, l)| EpisodeResult::from_line(l).map_err(|msg| EvalError::Format { line: i + 1, msg }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub seed: u64,
    pub mode: ActMode,
    pub max_steps: usize,
}

/// Attempts at drawing a valid episode before giving up.
const RESAMPLE_LIMIT: usize = 10_000;

/// Draws episode `index`: a world, a target of `group` present in it and a
/// start from which the target is reachable but not already in view.
fn sample_episode(
    worlds: &[GridWorld],
    split: &ClassSplit,
    group: TargetGroup,
    seed: u64,
    index: u64,
) -> Result<(usize, String, Pose, usize)> {
    let stream = format!("eval-{}", group.as_str());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &stream, index));
    for _ in 0..RESAMPLE_LIMIT {
        let wi = rng.gen_range(0..worlds.len());
        let world = &worlds[wi];
        let targets: Vec<&str> = world
            .classes_present()
            .into_iter()
            .filter(|c| split.role(c) == Some(group.role()))
            .collect();
        if targets.is_empty() {
            continue;
        }
        let target = targets[rng.gen_range(0..targets.len())];
        let free: Vec<(i32, i32)> = world.free_cells().collect();
        let (x, y) = free[rng.gen_range(0..free.len())];
        let start = Pose::new(x, y, rng.gen_range(0..8), 0);
        match shortest_path_length(world, start, target) {
            Some(l) if l >= 1 => return Ok((wi, target.to_string(), start, l)),
            _ => continue,
        }
    }
    Err(EvalError::NoTargets(group.as_str()))
}

/// Runs `n_episodes` evaluation episodes with targets from `group`.
/// Episodes run in parallel; results depend only on the seed.
pub fn run_eval(
    network: &Network,
    params: &ParamStore,
    split: &ClassSplit,
    table: &EmbeddingTable,
    worlds: &[GridWorld],
    group: TargetGroup,
    cfg: &EvalConfig,
) -> Result<Vec<EpisodeResult>> {
    network.check_split(split)?;
    if cfg.n_episodes == 0 {
        return Ok(Vec::new());
    }
    if worlds.is_empty() {
        return Err(EvalError::NoTargets(group.as_str()));
    }
    let policy = Policy { network, params };
    (0..cfg.n_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let (wi, target, start, optimal_len) = sample_episode(worlds, split, group, cfg.seed, i)?;
            let world = &worlds[wi];
            let ctx = EpisodeContext::new(world, split, table, &target)?;
            let stream = format!("eval-act-{}", group.as_str());
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &stream, i));
            let traj = run_episode(&ctx, start, policy, &mut NoReward, cfg.max_steps, cfg.mode, &mut rng)?;
            let actions: String = traj.steps.iter().map(|s| s.action.code()).collect();
            let path_len = traj.steps.iter().filter(|s| s.action != Action::Done).count();
            Ok(EpisodeResult {
                success: traj.success,
                path_len,
                optimal_len,
                target,
                group,
                world_seed: world.seed,
                room_type: world.room_type.clone(),
                start,
                actions,
            })
        })
        .collect()
}

/// `100 * mean(S_i)`.
pub fn success_rate(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let s = results.iter().filter(|r| r.success).count();
    Ok(100.0 * s as f64 / results.len() as f64)
}

/// `100 * mean(S_i * l_i / max(l_i, e_i))`, with a success at `l_i = 0`
/// counted as 1.
pub fn spl(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let total: f64 = results
        .iter()
        .filter(|r| r.success)
        .map(|r| {
            if r.optimal_len == 0 {
                1.0
            } else {
                r.optimal_len as f64 / r.optimal_len.max(r.path_len) as f64
            }
        })
        .fold(0.0, |a, b| a + b);
    Ok(100.0 * total / results.len() as f64)
}

/// Keeps episodes whose optimal length is at least `threshold`.
pub fn bucket(results: &[EpisodeResult], threshold: usize) -> Vec<EpisodeResult> {
    results.iter().filter(|r| r.optimal_len >= threshold).cloned().collect()
}

pub const BUCKETS: [usize; 2] = [1, 5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub sr: f64,
    pub spl: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// `seen`, `unseen` or `all`.
    pub group: &'static str,
    pub bucket: usize,
    /// `None` when the group has no episodes in the bucket.
    pub cell: Option<Cell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

pub fn report(results: &[EpisodeResult]) -> MetricsReport {
    let mut rows = Vec::new();
    let groups: [(&'static str, Option<TargetGroup>); 3] = [
        ("unseen", Some(TargetGroup::Unseen)),
        ("seen", Some(TargetGroup::Seen)),
        ("all", None),
    ];
    for (name, group) in groups {
        let members: Vec<EpisodeResult> = results
            .iter()
            .filter(|r| group.is_none_or(|g| r.group == g))
            .cloned()
            .collect();
        for threshold in BUCKETS {
            let b = bucket(&members, threshold);
            let cell = match (success_rate(&b), spl(&b)) {
                (Ok(sr), Ok(spl)) => Some(Cell { sr, spl, n: b.len() }),
                _ => None,
            };
            rows.push(MetricsRow {
                group: name,
                bucket: threshold,
                cell,
            });
        }
    }
    MetricsReport { rows }
}

impl MetricsReport {
    pub fn get(&self, group: &str, bucket: usize) -> Option<Cell> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.bucket == bucket)
            .and_then(|r| r.cell)
    }

    /// Aligned table with one column pair per bucket, one line per group.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut head = format!("{:<8}", "group");
        for b in BUCKETS {
            let _ = write!(head, " | {:>8} {:>8} {:>5}", format!("SR L>={b}"), "SPL", "N");
        }
        out.push_str(head.trim_end());
        out.push('\n');
        out.push_str(&"-".repeat(head.trim_end().len()));
        out.push('\n');
        for group in ["unseen", "seen", "all"] {
            let mut line = format!("{group:<8}");
            for b in BUCKETS {
                match self.get(group, b) {
                    Some(c) => {
                        let _ = write!(line, " | {:>8.1} {:>8.1} {:>5}", c.sr, c.spl, c.n);
                    }
                    None => {
                        let _ = write!(line, " | {:>8} {:>8} {:>5}", "-", "-", 0);
                    }
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,bucket,SR,SPL,N\n");
        for r in &self.rows {
            match r.cell {
                Some(c) => writeln!(out, "{},L>={},{},{},{}", r.group, r.bucket, c.sr, c.spl, c.n),
                None => writeln!(out, "{},L>={},NA,NA,0", r.group, r.bucket),
            }
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind};
    use crate::testutil::{small_split, small_table};
    use crate::training::world_pool;
    use crate::world::WorldSpec;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Just, Strategy};

    fn ep(group: TargetGroup, success: bool, l: usize, e: usize) -> EpisodeResult {
        EpisodeResult {
            success,
            path_len: e,
            optimal_len: l,
            target: "t".into(),
            group,
            world_seed: 0,
            room_type: "k".into(),
            start: Pose::new(0, 0, 0, 0),
            actions: "M".repeat(e),
        }
    }

    #[test]
    fn success_rate_examples() {
        use TargetGroup::Seen;
        assert_eq!(success_rate(&[ep(Seen, true, 1, 1), ep(Seen, false, 1, 1)]).unwrap(), 50.0);
        assert_eq!(success_rate(&[ep(Seen, false, 1, 1)]).unwrap(), 0.0);
        let three = [true, true, false, true].map(|s| ep(Seen, s, 2, 2));
        assert_eq!(success_rate(&three).unwrap(), 75.0);
        assert_eq!(success_rate(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn spl_examples() {
        use TargetGroup::Seen;
        assert_eq!(spl(&[ep(Seen, true, 4, 8)]).unwrap(), 50.0);
        assert_eq!(spl(&[ep(Seen, true, 4, 4)]).unwrap(), 100.0);
        assert_eq!(spl(&[ep(Seen, false, 4, 9)]).unwrap().to_bits(), 0.0f64.to_bits());
        assert_eq!(spl(&[ep(Seen, true, 0, 3)]).unwrap(), 100.0);
        assert_eq!(spl(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn bucket_examples() {
        use TargetGroup::Seen;
        let rs = [ep(Seen, true, 0, 0), ep(Seen, false, 3, 3), ep(Seen, true, 7, 9)];
        let b5 = bucket(&rs, 5);
        assert_eq!(b5, vec![rs[2].clone()]);
        assert_eq!(bucket(&rs, 1), rs[1..].to_vec());
    }

    /// Two seen (S=1 l=2 e=2; S=0) and two unseen (S=1 l=6 e=12; S=0).
    pub(crate) fn fixture() -> Vec<EpisodeResult> {
        use TargetGroup::*;
        vec![
            ep(Seen, true, 2, 2),
            ep(Seen, false, 3, 10),
            ep(Unseen, true, 6, 12),
            ep(Unseen, false, 3, 10),
        ]
    }

    #[test]
    fn report_fixture() {
        let r = report(&fixture());
        let seen = r.get("seen", 1).unwrap();
        assert_eq!((seen.sr, seen.spl, seen.n), (50.0, 50.0, 2));
        let unseen = r.get("unseen", 1).unwrap();
        assert_eq!((unseen.sr, unseen.spl), (50.0, 25.0));
        let unseen5 = r.get("unseen", 5).unwrap();
        assert_eq!((unseen5.sr, unseen5.spl, unseen5.n), (100.0, 50.0, 1));
        assert_eq!(r.get("seen", 5), None);
        let all = r.get("all", 1).unwrap();
        assert_eq!(all.n, 4);
        let csv = r.to_csv();
        assert!(csv.contains("seen,L>=5,NA,NA,0"));
        assert!(r.to_table().contains("unseen"));
    }

    #[test]
    fn empty_unseen_group_is_absent() {
        let seen_only: Vec<_> = fixture().into_iter().filter(|r| r.group == TargetGroup::Seen).collect();
        let r = report(&seen_only);
        assert_eq!(r.get("unseen", 1), None);
        assert_eq!(r.get("unseen", 5), None);
        assert!(r.get("seen", 1).is_some());
    }

    fn results_strategy() -> impl Strategy<Value = Vec<EpisodeResult>> {
        proptest::collection::vec(
            (proptest::bool::ANY, 0usize..15, 0usize..30, proptest::bool::ANY).prop_flat_map(|(s, l, extra, unseen)| {
                let g = if unseen { TargetGroup::Unseen } else { TargetGroup::Seen };
                Just(ep(g, s, l, if s { l + extra } else { extra }))
            }),
            1..60,
        )
    }

    proptest! {
        #[test]
        fn spl_bounded_by_sr_and_order_free(rs in results_strategy(), rot in 0usize..60) {
            let sr = success_rate(&rs).unwrap();
            let p = spl(&rs).unwrap();
            prop_assert!(p <= sr + 1e-12);
            let mut shuffled = rs.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(success_rate(&shuffled).unwrap(), sr);
            prop_assert!((spl(&shuffled).unwrap() - p).abs() < 1e-12);
            for row in report(&rs).rows {
                if let Some(c) = row.cell {
                    prop_assert!(c.spl <= c.sr + 1e-12);
                }
            }
        }
    }

    #[test]
    fn episode_log_round_trip() {
        let mut rs = fixture();
        rs[1].actions.clear();
        rs[2].start = Pose::new(3, 4, 7, -1);
        let text = episode_log_to_text(&rs);
        assert_eq!(episode_log_from_text(&text).unwrap(), rs);
        assert!(episode_log_from_text("bogus\n").is_err());
        assert!(episode_log_from_text(&format!("{EPISODE_LOG_HEADER}\nseen t 1 k 0 0 0 0 2 1 1 M\n")).is_err());
    }

    fn eval_setup() -> (ClassSplit, EmbeddingTable, Vec<GridWorld>, Network, ParamStore) {
        let (split, table) = (small_split(), small_table());
        let spec = WorldSpec {
            objects_per_class: (1, 2),
            ..WorldSpec::default()
        };
        let worlds = world_pool(3, "test-world", 3, &spec, &split, &table).unwrap();
        let (net, params) = Network::new(
            ModelConfig {
                hidden: 8,
                ..ModelConfig::default()
            },
            split.num_model_classes(),
            table.dim(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        (split, table, worlds, net, params)
    }

    #[test]
    fn run_eval_contract() {
        let (split, table, worlds, net, params) = eval_setup();
        let cfg = EvalConfig {
            n_episodes: 40,
            seed: 5,
            mode: ActMode::Greedy,
            max_steps: 20,
        };
        for group in [TargetGroup::Seen, TargetGroup::Unseen] {
            let a = run_eval(&net, &params, &split, &table, &worlds, group, &cfg).unwrap();
            assert_eq!(a.len(), 40);
            assert!(a.iter().all(|r| r.optimal_len >= 1 && r.group == group));
            assert!(a.iter().all(|r| !r.success || r.path_len >= r.optimal_len));
            assert!(a.iter().all(|r| split.role(&r.target) == Some(group.role())));
            let b = run_eval(&net, &params, &split, &table, &worlds, group, &cfg).unwrap();
            assert_eq!(a, b);
            let serial = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .unwrap()
                .install(|| run_eval(&net, &params, &split, &table, &worlds, group, &cfg).unwrap());
            assert_eq!(a, serial);
        }
        let none = EvalConfig { n_episodes: 0, ..cfg };
        assert!(run_eval(&net, &params, &split, &table, &worlds, TargetGroup::Seen, &none).unwrap().is_empty());
    }

    #[test]
    fn run_eval_rejects_row_mismatch() {
        let (split, table, worlds, _, _) = eval_setup();
        let (net, params) = Network::new(ModelConfig::default(), 7, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = EvalConfig {
            n_episodes: 1,
            seed: 0,
            mode: ActMode::Greedy,
            max_steps: 5,
        };
        assert!(matches!(
            run_eval(&net, &params, &split, &table, &worlds, TargetGroup::Seen, &cfg),
            Err(EvalError::Model(ModelError::RowMismatch { .. }))
        ));
    }

    #[test]
    fn random_policy_evaluates() {
        let (split, table, worlds, _, _) = eval_setup();
        let (net, params) = Network::new(
            ModelConfig {
                kind: ModelKind::Random,
                ..ModelConfig::default()
            },
            split.num_model_classes(),
            table.dim(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let cfg = EvalConfig {
            n_episodes: 30,
            seed: 2,
            mode: ActMode::Sample,
            max_steps: 30,
        };
        let rs = run_eval(&net, &params, &split, &table, &worlds, TargetGroup::Unseen, &cfg).unwrap();
        assert_eq!(rs, run_eval(&net, &params, &split, &table, &worlds, TargetGroup::Unseen, &cfg).unwrap());
        let codes: std::collections::BTreeSet<char> = rs.iter().flat_map(|r| r.actions.chars()).collect();
        assert!(codes.len() >= 5);
    }
}
