//! Text rendering of a logged episode, one frame per action.
//!
//! Map legend: `#` wall, `T` target object, `o` other object, `.` floor,
//! and the agent as an arrow for its heading. North (+y) is up.

use std::fmt::Write as _;

use ssnav_core::eval::EpisodeResult;
use ssnav_core::reward::{semantic_reward, RewardConfig, RewardState};
use ssnav_core::semantic::{ClassRole, ClassSplit, EmbeddingTable};
use ssnav_core::world::{step, success_check, visible_objects, Action, GridWorld, Pose};

const HEADING_NAMES: [&str; 8] = ["N", "NE", "E", "SE", "S", "SW", "W", "NW"];
const HEADING_GLYPHS: [char; 8] = ['^', '/', '>', '\\', 'v', '/', '<', '\\'];

fn tilt_name(tilt: i8) -> &'static str {
    match tilt {
        -1 => "down",
        0 => "level",
        _ => "up",
    }
}

fn action_name(a: Action) -> &'static str {
    match a {
        Action::MoveAhead => "MoveAhead",
        Action::RotateLeft => "RotateLeft",
        Action::RotateRight => "RotateRight",
        Action::LookUp => "LookUp",
        Action::LookDown => "LookDown",
        Action::Done => "Done",
    }
}

pub fn render_map(world: &GridWorld, pose: &Pose, target: &str) -> String {
    let mut out = String::new();
    for y in (0..world.height()).rev() {
        for x in 0..world.width() {
            let objs: Vec<_> = world.objects().iter().filter(|o| o.x == x && o.y == y).collect();
            let c = if (x, y) == (pose.x, pose.y) {
                HEADING_GLYPHS[pose.heading as usize % 8]
            } else if world.is_wall(x, y) {
                '#'
            } else if objs.iter().any(|o| o.class_name == target) {
                'T'
            } else if !objs.is_empty() {
                'o'
            } else {
                '.'
            };
            out.push(c);
        }
        out.push('\n');
    }
    out
}

/// Renders every step of `ep` in `world`. Rewards are shown for seen
/// targets only; the semantic reward is undefined for other targets.
pub fn render_episode(
    world: &GridWorld,
    ep: &EpisodeResult,
    split: &ClassSplit,
    table: &EmbeddingTable,
    reward: &RewardConfig,
) -> Result<String, String> {
    let actions: Vec<Action> = ep
        .actions
        .chars()
        .map(|c| Action::from_code(c).ok_or_else(|| format!("unknown action code `{c}`")))
        .collect::<Result<_, _>>()?;
    let rewarded = split.role(&ep.target) == Some(ClassRole::Seen);
    let mut out = String::new();
    writeln!(
        out,
        "episode: target {} ({}) world {} room {} start ({}, {}) heading {}",
        ep.target,
        ep.group.as_str(),
        ep.world_seed,
        ep.room_type,
        ep.start.x,
        ep.start.y,
        HEADING_NAMES[ep.start.heading as usize % 8]
    )
    .unwrap();
    writeln!(out, "optimal length {}, {} actions logged", ep.optimal_len, actions.len()).unwrap();
    let mut pose = ep.start;
    let mut state = RewardState::new();
    let mut total = 0.0;
    let mut success = false;
    for (t, &action) in actions.iter().enumerate() {
        let visible = visible_objects(world, &pose);
        let names: Vec<&str> = visible.iter().map(|(o, _)| o.class_name.as_str()).collect();
        writeln!(out, "\nframe {}/{}", t + 1, actions.len()).unwrap();
        writeln!(
            out,
            "pose: ({}, {}) heading {} tilt {}",
            pose.x,
            pose.y,
            HEADING_NAMES[pose.heading as usize % 8],
            tilt_name(pose.tilt)
        )
        .unwrap();
        if visible.is_empty() {
            writeln!(out, "visible: none").unwrap();
        } else {
            let list: Vec<String> = visible
                .iter()
                .map(|(o, d)| format!("{} at ({}, {}) area {:.3}", o.class_name, o.x, o.y, d.area))
                .collect();
            writeln!(out, "visible: {}", list.join("; ")).unwrap();
        }
        let r = if rewarded {
            let (r, s) = semantic_reward(state, action, &ep.target, &names, split, table, reward).map_err(|e| e.to_string())?;
            state = s;
            total += r;
            format!("{r}")
        } else {
            "n/a".to_string()
        };
        writeln!(out, "action: {}  reward: {r}", action_name(action)).unwrap();
        out.push_str(&render_map(world, &pose, &ep.target));
        if action == Action::Done {
            success = success_check(world, &pose, &ep.target);
            break;
        }
        pose = step(world, pose, action).0;
    }
    writeln!(out).unwrap();
    if rewarded {
        writeln!(out, "return: {total}").unwrap();
    }
    writeln!(out, "outcome: {}", if success { "success" } else { "failure" }).unwrap();
    if success != ep.success {
        return Err(format!(
            "replayed outcome {success} disagrees with the logged outcome {}",
            ep.success
        ));
    }
    Ok(out)
}
