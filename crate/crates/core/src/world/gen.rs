use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GridWorld, PlacedObject, WorldError};
use crate::semantic::{ClassSplit, EmbeddingTable};

pub const ROOM_TYPES: [&str; 4] = ["kitchen", "livingroom", "bedroom", "bathroom"];

/// Parameters for [`gen_world`].
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub width: i32,
    pub height: i32,
    /// Fraction of cells turned into walls.
    pub wall_density: f64,
    /// Inclusive range of instances per class.
    pub objects_per_class: (usize, usize),
    /// Probability that an object is placed next to an instance of its most
    /// similar already-placed class.
    pub co_location_bias: f64,
    /// Relative weights of the low, mid and high height bands.
    pub band_weights: [f64; 3],
    /// Inclusive range of object sizes.
    pub size_range: (f64, f64),
    pub wall_retries: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            width: 10,
            height: 10,
            wall_density: 0.1,
            objects_per_class: (1, 1),
            co_location_bias: 0.0,
            band_weights: [0.25, 0.5, 0.25],
            size_range: (0.3, 1.0),
            wall_retries: 100,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::Infeasible(m));
        if self.width < 5 || self.height < 5 {
            return bad(format!("grid {}x{} smaller than 5x5", self.width, self.height));
        }
        if !(0.0..1.0).contains(&self.wall_density) {
            return bad(format!("wall density {}", self.wall_density));
        }
        if !(0.0..=1.0).contains(&self.co_location_bias) {
            return bad(format!("co-location bias {}", self.co_location_bias));
        }
        let (lo, hi) = self.objects_per_class;
        if lo > hi {
            return bad(format!("objects per class range {lo}..={hi}"));
        }
        if self.band_weights.iter().any(|w| *w < 0.0) || self.band_weights.iter().sum::<f64>() <= 0.0 {
            return bad(format!("band weights {:?}", self.band_weights));
        }
        let (smin, smax) = self.size_range;
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return bad(format!("size range {smin}..={smax}"));
        }
        Ok(())
    }
}

fn chebyshev(a: (i32, i32), b: (i32, i32)) -> i32 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Generates a connected world populated with every class of `split`.
pub fn gen_world(
    seed: u64,
    spec: &WorldSpec,
    split: &ClassSplit,
    embeddings: &EmbeddingTable,
) -> Result<GridWorld, WorldError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let cells: Vec<(i32, i32)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
    let n_walls = (spec.wall_density * cells.len() as f64).round() as usize;
    let room_type = ROOM_TYPES[rng.gen_range(0..ROOM_TYPES.len())];

    let mut base = None;
    for _ in 0..spec.wall_retries.max(1) {
        let walls: Vec<(i32, i32)> = cells.choose_multiple(&mut rng, n_walls).copied().collect();
        if let Ok(world) = GridWorld::new(w, h, &walls, vec![], room_type, seed) {
            base = Some(world);
            break;
        }
    }
    let mut world = base.ok_or_else(|| {
        WorldError::Infeasible(format!(
            "no connected wall layout after {} attempts",
            spec.wall_retries
        ))
    })?;
    let free: Vec<(i32, i32)> = world.free_cells().collect();

    let mut classes: Vec<&str> = split.all_classes().collect();
    for c in &classes {
        embeddings
            .get(c)
            .map_err(|_| WorldError::UnknownClass(c.to_string()))?;
    }
    classes.shuffle(&mut rng);

    let band_total: f64 = spec.band_weights.iter().sum();
    let mut objects: Vec<PlacedObject> = Vec::new();
    for class in classes {
        let (lo, hi) = spec.objects_per_class;
        let count = rng.gen_range(lo..=hi);
        if count > free.len() {
            return Err(WorldError::Infeasible(format!(
                "{count} instances of {class} but {} free cells",
                free.len()
            )));
        }
        // Most similar other class that already has instances.
        let anchor_class = {
            let mut best: Option<(&str, f64)> = None;
            for o in &objects {
                if o.class_name == class || best.is_some_and(|(c, _)| c == o.class_name) {
                    continue;
                }
                let s = embeddings
                    .similarity(class, &o.class_name)
                    .expect("classes checked above");
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((&o.class_name, s));
                }
            }
            best.map(|(c, _)| c.to_string())
        };
        for _ in 0..count {
            let open: Vec<(i32, i32)> = free
                .iter()
                .copied()
                .filter(|&(x, y)| !objects.iter().any(|o| o.class_name == class && o.x == x && o.y == y))
                .collect();
            let near_anchor = match &anchor_class {
                Some(anchor) if rng.gen::<f64>() < spec.co_location_bias => {
                    let anchors: Vec<(i32, i32)> = objects
                        .iter()
                        .filter(|o| &o.class_name == anchor)
                        .map(|o| (o.x, o.y))
                        .collect();
                    let a = anchors[rng.gen_range(0..anchors.len())];
                    let near: Vec<(i32, i32)> =
                        open.iter().copied().filter(|&c| chebyshev(c, a) <= 2).collect();
                    near.choose(&mut rng).copied()
                }
                _ => None,
            };
            let (x, y) = match near_anchor {
                Some(c) => c,
                None => *open.choose(&mut rng).expect("count checked against free cells"),
            };
            let r = rng.gen::<f64>() * band_total;
            let height_band = if r < spec.band_weights[0] {
                -1
            } else if r < spec.band_weights[0] + spec.band_weights[1] {
                0
            } else {
                1
            };
            let (smin, smax) = spec.size_range;
            let size = if smin == smax { smin } else { rng.gen_range(smin..=smax) };
            objects.push(PlacedObject {
                class_name: class.to_string(),
                x,
                y,
                height_band,
                size,
            });
        }
    }
    world.objects = objects;
    world.validate()?;
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{small_split, small_table};

    #[test]
    fn deterministic_in_seed() {
        let spec = WorldSpec::default();
        let (split, table) = (small_split(), small_table());
        let a = gen_world(3, &spec, &split, &table).unwrap();
        assert_eq!(a, gen_world(3, &spec, &split, &table).unwrap());
        assert_ne!(a, gen_world(4, &spec, &split, &table).unwrap());
    }

    #[test]
    fn zero_wall_density() {
        let spec = WorldSpec {
            wall_density: 0.0,
            ..WorldSpec::default()
        };
        let w = gen_world(1, &spec, &small_split(), &small_table()).unwrap();
        assert_eq!(w.wall_cells().count(), 0);
    }

    #[test]
    fn every_class_placed_within_count_range() {
        let spec = WorldSpec {
            objects_per_class: (1, 3),
            ..WorldSpec::default()
        };
        let split = small_split();
        let w = gen_world(9, &spec, &split, &small_table()).unwrap();
        for c in split.all_classes() {
            let n = w.objects().iter().filter(|o| o.class_name == c).count();
            assert!((1..=3).contains(&n), "{c}: {n}");
        }
    }

    #[test]
    fn infeasible_specs() {
        let (split, table) = (small_split(), small_table());
        let tiny = WorldSpec {
            width: 4,
            ..WorldSpec::default()
        };
        assert!(matches!(gen_world(0, &tiny, &split, &table), Err(WorldError::Infeasible(_))));
        let crowded = WorldSpec {
            width: 5,
            height: 5,
            objects_per_class: (30, 30),
            ..WorldSpec::default()
        };
        assert!(matches!(gen_world(0, &crowded, &split, &table), Err(WorldError::Infeasible(_))));
    }

    fn mean_pair_distance(bias: f64, a: &str, b: &str) -> f64 {
        let spec = WorldSpec {
            co_location_bias: bias,
            ..WorldSpec::default()
        };
        let (split, table) = (small_split(), small_table());
        let mut total = 0.0;
        let mut n = 0;
        for seed in 0..100 {
            let w = gen_world(seed, &spec, &split, &table).unwrap();
            for oa in w.objects().iter().filter(|o| o.class_name == a) {
                for ob in w.objects().iter().filter(|o| o.class_name == b) {
                    total += (((oa.x - ob.x).pow(2) + (oa.y - ob.y).pow(2)) as f64).sqrt();
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn co_location_bias_pulls_cluster_mates_together() {
        // s1 and u share a cluster in the test table.
        let biased = mean_pair_distance(1.0, "s1", "u");
        let uniform = mean_pair_distance(0.0, "s1", "u");
        assert!(biased < uniform, "biased {biased} vs uniform {uniform}");
    }
}
