//! Procedural gridworld household.
//!
//! One cell is 0.25 m. The agent occupies a cell, faces one of eight
//! headings (45 degree steps, heading 0 is +y, increasing clockwise) and
//! pitches its camera to one of three tilts. Objects sit in cells at one
//! of three height bands and are only seen when the tilt matches.

mod gen;
mod io;
mod path;
mod vis;

use thiserror::Error;

pub use gen::{gen_world, WorldSpec};
pub use io::WORLD_HEADER;
pub use path::shortest_path_length;
pub use vis::{detection_matrix, success_check, supercover_line, visible_objects, Detection, DetectionMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("infeasible world spec: {0}")]
    Infeasible(String),
    #[error("class `{0}` in world is not part of the class split")]
    UnknownClass(String),
    #[error("world file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for WorldError {
    fn from(e: std::io::Error) -> Self {
        WorldError::Io(e.to_string())
    }
}

/// The six discrete actions, encoded 0..5 in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    MoveAhead = 0,
    RotateLeft = 1,
    RotateRight = 2,
    LookUp = 3,
    LookDown = 4,
    Done = 5,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::MoveAhead,
        Action::RotateLeft,
        Action::RotateRight,
        Action::LookUp,
        Action::LookDown,
        Action::Done,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Single-letter code used in episode logs.
    pub fn code(self) -> char {
        match self {
            Action::MoveAhead => 'M',
            Action::RotateLeft => 'L',
            Action::RotateRight => 'R',
            Action::LookUp => 'U',
            Action::LookDown => 'D',
            Action::Done => 'X',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Self::ALL.iter().copied().find(|a| a.code() == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pose {
    pub x: i32,
    pub y: i32,
    /// 0..8, multiples of 45 degrees clockwise from +y.
    pub heading: u8,
    /// -1, 0 or +1 (camera pitched down 30, level, up 30 degrees).
    pub tilt: i8,
}

impl Pose {
    pub fn new(x: i32, y: i32, heading: u8, tilt: i8) -> Self {
        Self { x, y, heading, tilt }
    }

    /// Unit step along the heading.
    pub fn direction(&self) -> (i32, i32) {
        heading_vector(self.heading)
    }
}

pub fn heading_vector(heading: u8) -> (i32, i32) {
    const DIRS: [(i32, i32); 8] = [
        (0, 1),
        (1, 1),
        (1, 0),
        (1, -1),
        (0, -1),
        (-1, -1),
        (-1, 0),
        (-1, 1),
    ];
    DIRS[(heading % 8) as usize]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    Moved,
    Rotated,
    Tilted,
    Blocked,
    EpisodeEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub class_name: String,
    pub x: i32,
    pub y: i32,
    /// -1 low, 0 mid, +1 high; visible only at the matching tilt.
    pub height_band: i8,
    /// Fraction of the view the object fills at one cell distance, in (0, 1].
    pub size: f64,
}

/// Range and field of view of the agent's camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensor {
    /// Maximum Euclidean distance in cells (6 cells = 1.5 m).
    pub range_cells: f64,
    /// Total horizontal field of view in degrees.
    pub fov_deg: f64,
}

impl Default for Sensor {
    fn default() -> Self {
        Self {
            range_cells: 6.0,
            fov_deg: 90.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    width: i32,
    height: i32,
    walls: Vec<bool>,
    objects: Vec<PlacedObject>,
    pub room_type: String,
    pub seed: u64,
    pub sensor: Sensor,
}

impl GridWorld {
    /// Builds a world and checks every invariant (bounds, free object cells,
    /// unique (cell, class) pairs, 4-connected free space).
    pub fn new(
        width: i32,
        height: i32,
        walls: &[(i32, i32)],
        objects: Vec<PlacedObject>,
        room_type: impl Into<String>,
        seed: u64,
    ) -> Result<Self, WorldError> {
        if width <= 0 || height <= 0 {
            return Err(WorldError::Invalid(format!("size {width}x{height}")));
        }
        let mut grid = vec![false; (width * height) as usize];
        for &(x, y) in walls {
            if x < 0 || y < 0 || x >= width || y >= height {
                return Err(WorldError::Invalid(format!("wall ({x}, {y}) out of bounds")));
            }
            grid[(y * width + x) as usize] = true;
        }
        let world = Self {
            width,
            height,
            walls: grid,
            objects,
            room_type: room_type.into(),
            seed,
            sensor: Sensor::default(),
        };
        world.validate()?;
        Ok(world)
    }

    fn validate(&self) -> Result<(), WorldError> {
        if self.room_type.is_empty() || self.room_type.chars().any(char::is_whitespace) {
            return Err(WorldError::Invalid(format!("room type `{}`", self.room_type)));
        }
        let mut pairs = std::collections::HashSet::new();
        for o in &self.objects {
            if !self.is_free(o.x, o.y) {
                return Err(WorldError::Invalid(format!(
                    "object {} at ({}, {}) is out of bounds or in a wall",
                    o.class_name, o.x, o.y
                )));
            }
            if !(o.size > 0.0 && o.size <= 1.0) || !(-1..=1).contains(&o.height_band) {
                return Err(WorldError::Invalid(format!(
                    "object {} has size {} band {}",
                    o.class_name, o.size, o.height_band
                )));
            }
            if !pairs.insert((o.x, o.y, o.class_name.as_str())) {
                return Err(WorldError::Invalid(format!(
                    "two {} objects share cell ({}, {})",
                    o.class_name, o.x, o.y
                )));
            }
        }
        if !self.is_connected() {
            return Err(WorldError::Invalid("free cells are not connected".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> i32 {
        self.width
    }

    pub fn height(&self) -> i32 {
        self.height
    }

    pub fn objects(&self) -> &[PlacedObject] {
        &self.objects
    }

    pub fn in_bounds(&self, x: i32, y: i32) -> bool {
        x >= 0 && y >= 0 && x < self.width && y < self.height
    }

    pub fn is_wall(&self, x: i32, y: i32) -> bool {
        self.in_bounds(x, y) && self.walls[(y * self.width + x) as usize]
    }

    pub fn is_free(&self, x: i32, y: i32) -> bool {
        self.in_bounds(x, y) && !self.walls[(y * self.width + x) as usize]
    }

    pub fn wall_cells(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        (0..self.height)
            .flat_map(move |y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.is_wall(x, y))
    }

    pub fn free_cells(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        (0..self.height)
            .flat_map(move |y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.is_free(x, y))
    }

    pub fn is_valid_pose(&self, p: &Pose) -> bool {
        self.is_free(p.x, p.y) && p.heading < 8 && (-1..=1).contains(&p.tilt)
    }

    pub fn has_class(&self, class: &str) -> bool {
        self.objects.iter().any(|o| o.class_name == class)
    }

    /// Distinct object classes in order of first appearance.
    pub fn classes_present(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for o in &self.objects {
            if !out.contains(&o.class_name.as_str()) {
                out.push(&o.class_name);
            }
        }
        out
    }

    fn is_connected(&self) -> bool {
        let free: Vec<(i32, i32)> = self.free_cells().collect();
        let Some(&start) = free.first() else {
            return true;
        };
        let mut seen = vec![false; self.walls.len()];
        let mut stack = vec![start];
        seen[(start.1 * self.width + start.0) as usize] = true;
        let mut count = 0;
        while let Some((x, y)) = stack.pop() {
            count += 1;
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x + dx, y + dy);
                if self.is_free(nx, ny) && !seen[(ny * self.width + nx) as usize] {
                    seen[(ny * self.width + nx) as usize] = true;
                    stack.push((nx, ny));
                }
            }
        }
        count == free.len()
    }
}

/// Applies one action. Invalid transitions leave the pose unchanged and
/// report [`StepEvent::Blocked`].
pub fn step(world: &GridWorld, pose: Pose, action: Action) -> (Pose, StepEvent) {
    match action {
        Action::MoveAhead => {
            let (dx, dy) = pose.direction();
            let (nx, ny) = (pose.x + dx, pose.y + dy);
            if world.is_free(nx, ny) {
                (Pose { x: nx, y: ny, ..pose }, StepEvent::Moved)
            } else {
                (pose, StepEvent::Blocked)
            }
        }
        Action::RotateLeft => (
            Pose {
                heading: (pose.heading + 7) % 8,
                ..pose
            },
            StepEvent::Rotated,
        ),
        Action::RotateRight => (
            Pose {
                heading: (pose.heading + 1) % 8,
                ..pose
            },
            StepEvent::Rotated,
        ),
        Action::LookUp | Action::LookDown => {
            let delta = if action == Action::LookUp { 1 } else { -1 };
            let tilt = pose.tilt + delta;
            if (-1..=1).contains(&tilt) {
                (Pose { tilt, ..pose }, StepEvent::Tilted)
            } else {
                (pose, StepEvent::Blocked)
            }
        }
        Action::Done => (pose, StepEvent::EpisodeEnd),
    }
}
