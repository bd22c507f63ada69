//! `ssnav-world v1` text format.
//!
//! ```text
//! ssnav-world v1
//! width = 10
//! height = 10
//! seed = 42
//! room_type = kitchen
//! range = 6
//! fov = 90
//! wall 3 4
//! obj cup 1 2 0 0.5
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{GridWorld, PlacedObject, Sensor, WorldError};

pub const WORLD_HEADER: &str = "ssnav-world v1";

impl GridWorld {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{WORLD_HEADER}").unwrap();
        writeln!(s, "width = {}", self.width).unwrap();
        writeln!(s, "height = {}", self.height).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "room_type = {}", self.room_type).unwrap();
        writeln!(s, "range = {}", self.sensor.range_cells).unwrap();
        writeln!(s, "fov = {}", self.sensor.fov_deg).unwrap();
        for (x, y) in self.wall_cells() {
            writeln!(s, "wall {x} {y}").unwrap();
        }
        for o in &self.objects {
            writeln!(
                s,
                "obj {} {} {} {} {}",
                o.class_name, o.x, o.y, o.height_band, o.size
            )
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, WorldError> {
        let err = |line: usize, msg: String| WorldError::Format { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, h)) if h.trim() == WORLD_HEADER => {}
            Some((n, h)) => return Err(err(n, format!("unsupported header `{h}`"))),
            None => return Err(err(0, "empty world file".into())),
        }
        let (mut width, mut height, mut seed) = (None, None, 0u64);
        let mut room_type = String::new();
        let mut sensor = Sensor::default();
        let mut walls = Vec::new();
        let mut objects = Vec::new();
        for (n, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                let (key, value) = (key.trim(), value.trim());
                let bad = |e: String| err(n, format!("{key}: {e}"));
                match key {
                    "width" => width = Some(value.parse::<i32>().map_err(|e| bad(e.to_string()))?),
                    "height" => height = Some(value.parse::<i32>().map_err(|e| bad(e.to_string()))?),
                    "seed" => seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                    "room_type" => room_type = value.to_string(),
                    "range" => sensor.range_cells = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                    "fov" => sensor.fov_deg = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                    _ => return Err(err(n, format!("unknown key `{key}`"))),
                }
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            let int = |w: &str| w.parse::<i32>().map_err(|e| err(n, e.to_string()));
            match words.as_slice() {
                ["wall", x, y] => walls.push((int(x)?, int(y)?)),
                ["obj", class, x, y, band, size] => objects.push(PlacedObject {
                    class_name: class.to_string(),
                    x: int(x)?,
                    y: int(y)?,
                    height_band: band.parse().map_err(|e: std::num::ParseIntError| err(n, e.to_string()))?,
                    size: size.parse().map_err(|e: std::num::ParseFloatError| err(n, e.to_string()))?,
                }),
                _ => return Err(err(n, format!("unrecognized line `{line}`"))),
            }
        }
        let width = width.ok_or_else(|| err(0, "missing width".into()))?;
        let height = height.ok_or_else(|| err(0, "missing height".into()))?;
        if !(sensor.fov_deg > 0.0 && sensor.fov_deg <= 180.0) || sensor.range_cells < 0.0 {
            return Err(err(0, format!("bad sensor {sensor:?}")));
        }
        let mut world = GridWorld::new(width, height, &walls, objects, room_type, seed)?;
        world.sensor = sensor;
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{small_split, small_table};
    use crate::world::{gen_world, WorldSpec};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_load_identity(seed in any::<u64>(), density in 0.0f64..0.3) {
            let spec = WorldSpec { wall_density: density, objects_per_class: (1, 2), ..WorldSpec::default() };
            let w = gen_world(seed, &spec, &small_split(), &small_table()).unwrap();
            let text = w.to_text();
            let back = GridWorld::from_text(&text).unwrap();
            prop_assert_eq!(&back, &w);
            prop_assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn rejects_bad_files() {
        assert!(GridWorld::from_text("ssnav-world v2\nwidth = 5\nheight = 5\n").is_err());
        assert!(GridWorld::from_text("ssnav-world v1\nwidth = 5\n").is_err());
        assert!(GridWorld::from_text("ssnav-world v1\nwidth = 5\nheight = 5\nobj cup 9 9 0 0.5\n").is_err());
        assert!(GridWorld::from_text("ssnav-world v1\nwidth = 5\nheight = 5\nteleport 1\n").is_err());
    }
}
