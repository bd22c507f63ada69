//! Ground-truth perception: which objects the camera sees and the
//! detection rows they produce.

use super::{GridWorld, Pose, WorldError};
use crate::semantic::ClassSplit;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_name: String,
    pub visible: bool,
    /// Box centre in normalized image coordinates.
    pub x_c: f64,
    pub y_c: f64,
    /// Normalized box area.
    pub area: f64,
}

impl Detection {
    pub fn empty(class_name: &str) -> Self {
        Self {
            class_name: class_name.to_string(),
            visible: false,
            x_c: 0.0,
            y_c: 0.0,
            area: 0.0,
        }
    }

    /// `[v, x_c, y_c, area]`
    pub fn features(&self) -> [f64; 4] {
        [
            if self.visible { 1.0 } else { 0.0 },
            self.x_c,
            self.y_c,
            self.area,
        ]
    }
}

/// One detection row per model class, in [`ClassSplit::model_classes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMatrix {
    pub rows: Vec<Detection>,
}

/// Cells whose closed unit square touches the segment between the centres
/// of `from` and `to`, walked from `from`. When the segment passes exactly
/// through a cell corner both side cells are included.
pub fn supercover_line(from: (i32, i32), to: (i32, i32)) -> Vec<(i32, i32)> {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let (nx, ny) = (dx.abs() as i64, dy.abs() as i64);
    let (sx, sy) = (dx.signum(), dy.signum());
    let mut p = from;
    let mut cells = vec![p];
    let (mut ix, mut iy) = (0i64, 0i64);
    while ix < nx || iy < ny {
        let decision = (1 + 2 * ix) * ny - (1 + 2 * iy) * nx;
        if decision == 0 {
            cells.push((p.0 + sx, p.1));
            cells.push((p.0, p.1 + sy));
            p = (p.0 + sx, p.1 + sy);
            ix += 1;
            iy += 1;
        } else if decision < 0 {
            p.0 += sx;
            ix += 1;
        } else {
            p.1 += sy;
            iy += 1;
        }
        cells.push(p);
    }
    cells
}

fn line_of_sight(world: &GridWorld, from: (i32, i32), to: (i32, i32)) -> bool {
    supercover_line(from, to)
        .into_iter()
        .all(|(x, y)| !world.is_wall(x, y))
}

/// Squared cosine of half the field of view, computed so that 90 degrees
/// yields exactly 0.5.
fn half_fov_cos_sq(fov_deg: f64) -> f64 {
    (1.0 + fov_deg.to_radians().cos()) / 2.0
}

/// Detection for an object at offset `(dx, dy)` from the agent, or `None`
/// if it falls outside range or field of view.
fn project(world: &GridWorld, pose: &Pose, dx: i32, dy: i32, size: f64) -> Option<Detection> {
    let sensor = &world.sensor;
    let dist_sq = (dx * dx + dy * dy) as f64;
    if dist_sq > sensor.range_cells * sensor.range_cells {
        return None;
    }
    let (hx, hy) = pose.direction();
    let bearing_deg = if dx == 0 && dy == 0 {
        0.0
    } else {
        let dot = (hx * dx + hy * dy) as f64;
        let h_sq = (hx * hx + hy * hy) as f64;
        if dot < 0.0 || dot * dot < half_fov_cos_sq(sensor.fov_deg) * h_sq * dist_sq {
            return None;
        }
        let object_angle = (dx as f64).atan2(dy as f64).to_degrees();
        let mut b = object_angle - pose.heading as f64 * 45.0;
        while b >= 180.0 {
            b -= 360.0;
        }
        while b < -180.0 {
            b += 360.0;
        }
        b
    };
    let dist = dist_sq.sqrt();
    Some(Detection {
        class_name: String::new(),
        visible: true,
        x_c: (0.5 + bearing_deg / sensor.fov_deg).clamp(0.0, 1.0),
        y_c: 0.5,
        area: (size / dist.max(1.0).powi(2)).min(1.0),
    })
}

/// Every object the agent currently sees, with its detection.
pub fn visible_objects<'w>(
    world: &'w GridWorld,
    pose: &Pose,
) -> Vec<(&'w super::PlacedObject, Detection)> {
    world
        .objects()
        .iter()
        .filter(|o| o.height_band == pose.tilt)
        .filter_map(|o| {
            let mut det = project(world, pose, o.x - pose.x, o.y - pose.y, o.size)?;
            if !line_of_sight(world, (pose.x, pose.y), (o.x, o.y)) {
                return None;
            }
            det.class_name = o.class_name.clone();
            Some((o, det))
        })
        .collect()
}

/// Builds the per-model-class detection rows. Classes with several visible
/// instances report the one with the largest area (ties go to the smaller
/// `(x, y)`); unseen classes never get a row.
pub fn detection_matrix(
    world: &GridWorld,
    pose: &Pose,
    split: &ClassSplit,
) -> Result<DetectionMatrix, WorldError> {
    if let Some(o) = world.objects().iter().find(|o| split.role(&o.class_name).is_none()) {
        return Err(WorldError::UnknownClass(o.class_name.clone()));
    }
    let mut best: Vec<Option<(&super::PlacedObject, Detection)>> =
        vec![None; split.num_model_classes()];
    for (obj, det) in visible_objects(world, pose) {
        let Some(row) = split.model_row(&obj.class_name) else {
            continue;
        };
        let replace = match &best[row] {
            None => true,
            Some((cur, cur_det)) => {
                det.area > cur_det.area
                    || (det.area == cur_det.area && (obj.x, obj.y) < (cur.x, cur.y))
            }
        };
        if replace {
            best[row] = Some((obj, det));
        }
    }
    let rows = split
        .model_classes()
        .zip(best)
        .map(|(class, b)| b.map(|(_, d)| d).unwrap_or_else(|| Detection::empty(class)))
        .collect();
    Ok(DetectionMatrix { rows })
}

/// True when some instance of `target` is visible (which already implies
/// it is within the 1.5 m range).
pub fn success_check(world: &GridWorld, pose: &Pose, target: &str) -> bool {
    world
        .objects()
        .iter()
        .filter(|o| o.class_name == target && o.height_band == pose.tilt)
        .any(|o| {
            project(world, pose, o.x - pose.x, o.y - pose.y, o.size).is_some()
                && line_of_sight(world, (pose.x, pose.y), (o.x, o.y))
        })
}
