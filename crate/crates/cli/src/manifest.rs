//! World-pool manifest: which world files form the train and test pools.
//!
//! ```text
//! ssnav-manifest v1
//! seed = <master seed>
//! world <train|test> <world seed> <path relative to the manifest>
//! ```

use std::path::{Path, PathBuf};

use ssnav_core::world::GridWorld;

pub const MANIFEST_HEADER: &str = "ssnav-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Train,
    Test,
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Train => "train",
            Pool::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub pool: Pool,
    pub seed: u64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\nseed = {}\n", self.seed);
        for e in &self.entries {
            out.push_str(&format!("world {} {} {}\n", e.pool.as_str(), e.seed, e.path.display()));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            _ => return Err(format!("manifest must start with `{MANIFEST_HEADER}`")),
        }
        let mut seed = None;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                [] => {}
                ["seed", "=", s] => seed = Some(s.parse().map_err(|_| format!("line {n}: bad seed"))?),
                ["world", pool, s, path] => {
                    let pool = match *pool {
                        "train" => Pool::Train,
                        "test" => Pool::Test,
                        other => return Err(format!("line {n}: unknown pool `{other}`")),
                    };
                    entries.push(Entry {
                        pool,
                        seed: s.parse().map_err(|_| format!("line {n}: bad world seed"))?,
                        path: PathBuf::from(path),
                    });
                }
                _ => return Err(format!("line {n}: unrecognized `{line}`")),
            }
        }
        let m = Self {
            seed: seed.ok_or("manifest lacks `seed`")?,
            entries,
        };
        m.check_disjoint()?;
        Ok(m)
    }

    /// Train and test pools must not share a world seed.
    pub fn check_disjoint(&self) -> Result<(), String> {
        let train: std::collections::HashSet<u64> = self.seeds(Pool::Train).collect();
        match self.seeds(Pool::Test).find(|s| train.contains(s)) {
            Some(s) => Err(format!("world seed {s} is in both pools")),
            None => Ok(()),
        }
    }

    pub fn seeds(&self, pool: Pool) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().filter(move |e| e.pool == pool).map(|e| e.seed)
    }

    /// Loads the worlds of `pool`, resolving paths against `dir`.
    pub fn load_pool(&self, dir: &Path, pool: Pool) -> Result<Vec<GridWorld>, String> {
        self.entries
            .iter()
            .filter(|e| e.pool == pool)
            .map(|e| {
                let path = dir.join(&e.path);
                let w = GridWorld::load(&path).map_err(|err| format!("{}: {err}", path.display()))?;
                if w.seed != e.seed {
                    return Err(format!("{}: seed {} differs from manifest {}", path.display(), w.seed, e.seed));
                }
                Ok(w)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_overlap() {
        let m = Manifest {
            seed: 4,
            entries: vec![
                Entry {
                    pool: Pool::Train,
                    seed: 10,
                    path: "worlds/train-000.world".into(),
                },
                Entry {
                    pool: Pool::Test,
                    seed: 11,
                    path: "worlds/test-000.world".into(),
                },
            ],
        };
        assert_eq!(Manifest::from_text(&m.to_text()).unwrap(), m);
        let clash = m.to_text().replace("test 11", "test 10");
        assert!(Manifest::from_text(&clash).is_err());
        assert!(Manifest::from_text("ssnav-manifest v0\n").is_err());
    }
}
