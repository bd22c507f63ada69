use std::collections::VecDeque;

use super::{step, success_check, Action, GridWorld, Pose};

fn state_index(world: &GridWorld, p: &Pose) -> usize {
    let cell = (p.y * world.width() + p.x) as usize;
    (cell * 8 + p.heading as usize) * 3 + (p.tilt + 1) as usize
}

/// Fewest non-Done actions from `start` to a pose where `target` is
/// visible, by breadth-first search over (x, y, heading, tilt). `None` when
/// no such pose is reachable.
pub fn shortest_path_length(world: &GridWorld, start: Pose, target: &str) -> Option<usize> {
    if !world.has_class(target) {
        return None;
    }
    let n_states = (world.width() * world.height()) as usize * 8 * 3;
    let mut dist: Vec<Option<usize>> = vec![None; n_states];
    dist[state_index(world, &start)] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(pose) = queue.pop_front() {
        let d = dist[state_index(world, &pose)].expect("queued states have a distance");
        if success_check(world, &pose, target) {
            return Some(d);
        }
        for action in &Action::ALL[..5] {
            let (next, _) = step(world, pose, *action);
            let idx = state_index(world, &next);
            if dist[idx].is_none() {
                dist[idx] = Some(d + 1);
                queue.push_back(next);
            }
        }
    }
    None
}
