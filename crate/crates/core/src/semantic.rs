//! Per-class word embeddings and the cosine-similarity features derived
//! from them.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticError {
    #[error("class `{0}` missing from embedding table")]
    MissingClass(String),
    #[error("class `{0}` listed more than once")]
    DuplicateClass(String),
    #[error("embedding for `{class}` has {found} components, expected {expected}")]
    InconsistentDim {
        class: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding for `{0}` has zero norm")]
    ZeroNormVector(String),
    #[error("malformed embedding line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("vectors differ in length: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm input vector")]
    ZeroNorm,
    #[error("infeasible embedding spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid class split: {0}")]
    InvalidSplit(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SemanticError {
    fn from(e: std::io::Error) -> Self {
        SemanticError::Io(e.to_string())
    }
}

type Result<T> = std::result::Result<T, SemanticError>;

/// Class name to embedding vector, all of one dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: IndexMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, class: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let class = class.into();
        if vector.len() != self.dim {
            return Err(SemanticError::InconsistentDim {
                class,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if norm(&vector) == 0.0 {
            return Err(SemanticError::ZeroNormVector(class));
        }
        if self.entries.contains_key(&class) {
            return Err(SemanticError::DuplicateClass(class));
        }
        self.entries.insert(class, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: &str) -> Result<&[f64]> {
        self.entries
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| SemanticError::MissingClass(class.to_string()))
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Similarity between two stored classes.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        cosine_similarity(self.get(a)?, self.get(b)?)
    }

    /// GloVe-style text: one `<class> <f> <f> ...` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (class, v) in &self.entries {
            out.push_str(class);
            for x in v {
                write!(out, " {x}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reads the requested `classes` (in request order) from GloVe-format text.
pub fn parse_embeddings(text: &str, classes: &[&str]) -> Result<EmbeddingTable> {
    let wanted: HashSet<&str> = classes.iter().copied().collect();
    if wanted.len() != classes.len() {
        let mut seen = HashSet::new();
        let dup = classes.iter().find(|c| !seen.insert(**c)).unwrap();
        return Err(SemanticError::DuplicateClass(dup.to_string()));
    }
    let mut dim: Option<usize> = None;
    let mut found: IndexMap<&str, Vec<f64>> = IndexMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let mut words = line.split_whitespace();
        let Some(class) = words.next() else {
            continue;
        };
        let values = words
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| SemanticError::Malformed {
                line: lineno,
                msg: e.to_string(),
            })?;
        if values.is_empty() {
            return Err(SemanticError::Malformed {
                line: lineno,
                msg: format!("no components for `{class}`"),
            });
        }
        let expected = *dim.get_or_insert(values.len());
        if values.len() != expected {
            return Err(SemanticError::InconsistentDim {
                class: class.to_string(),
                expected,
                found: values.len(),
            });
        }
        if wanted.contains(class) {
            if found.contains_key(class) {
                return Err(SemanticError::DuplicateClass(class.to_string()));
            }
            found.insert(class, values);
        }
    }
    let mut table = EmbeddingTable::new(dim.unwrap_or(0));
    for &class in classes {
        let v = found
            .swap_remove(class)
            .ok_or_else(|| SemanticError::MissingClass(class.to_string()))?;
        table.insert(class, v)?;
    }
    Ok(table)
}

pub fn load_embeddings(path: &Path, classes: &[&str]) -> Result<EmbeddingTable> {
    parse_embeddings(&std::fs::read_to_string(path)?, classes)
}

/// Norm of the per-class perturbation added to its unit cluster centroid.
const CLUSTER_SPREAD: f64 = 0.35;
const CENTROID_MAX_COS: f64 = 0.1;
pub const SAME_CLUSTER_MIN_COS: f64 = 0.7;
pub const CROSS_CLUSTER_MAX_COS: f64 = 0.3;
const RESAMPLE_BUDGET: usize = 2000;

/// Synthesizes a table where classes sharing a cluster id have pairwise
/// cosine similarity >= 0.7 and classes in different clusters <= 0.3.
pub fn synth_embeddings(
    seed: u64,
    classes: &[&str],
    dim: usize,
    clusters: &[usize],
) -> Result<EmbeddingTable> {
    if dim < 2 {
        return Err(SemanticError::InfeasibleSpec(format!("dim {dim} < 2")));
    }
    if clusters.len() != classes.len() {
        return Err(SemanticError::InfeasibleSpec(format!(
            "{} cluster ids for {} classes",
            clusters.len(),
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let unit = |mut v: Vec<f64>| {
        let n = norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        v
    };

    let mut ids: Vec<usize> = clusters.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut centroids: IndexMap<usize, Vec<f64>> = IndexMap::new();
    for &id in &ids {
        let mut accepted = None;
        for _ in 0..RESAMPLE_BUDGET {
            let c = unit(gaussian(dim));
            if centroids
                .values()
                .all(|o| dot(o, &c) <= CENTROID_MAX_COS)
            {
                accepted = Some(c);
                break;
            }
        }
        let c = accepted.ok_or_else(|| {
            SemanticError::InfeasibleSpec(format!(
                "cannot place {} mutually dissimilar cluster centroids in {dim} dimensions",
                ids.len()
            ))
        })?;
        centroids.insert(id, c);
    }

    for _ in 0..RESAMPLE_BUDGET {
        let vectors: Vec<Vec<f64>> = clusters
            .iter()
            .map(|id| {
                let noise = unit(gaussian(dim));
                let v = centroids[id]
                    .iter()
                    .zip(&noise)
                    .map(|(c, n)| c + CLUSTER_SPREAD * n)
                    .collect();
                unit(v)
            })
            .collect();
        let ok = (0..vectors.len()).all(|i| {
            (i + 1..vectors.len()).all(|j| {
                let cos = dot(&vectors[i], &vectors[j]);
                if clusters[i] == clusters[j] {
                    cos >= SAME_CLUSTER_MIN_COS
                } else {
                    cos <= CROSS_CLUSTER_MAX_COS
                }
            })
        });
        if ok {
            let mut table = EmbeddingTable::new(dim);
            for (class, v) in classes.iter().zip(vectors) {
                table.insert(*class, v)?;
            }
            return Ok(table);
        }
    }
    Err(SemanticError::InfeasibleSpec(
        "per-class perturbations never satisfied the similarity bounds".into(),
    ))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(a . b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SemanticError::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(SemanticError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Seen, unseen and irrelevant class lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    seen: Vec<String>,
    unseen: Vec<String>,
    irrelevant: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassRole {
    Seen,
    Unseen,
    Irrelevant,
}

impl ClassSplit {
    pub fn new<S: AsRef<str>>(seen: &[S], unseen: &[S], irrelevant: &[S]) -> Result<Self> {
        let own = |v: &[S]| v.iter().map(|s| s.as_ref().to_string()).collect::<Vec<_>>();
        let split = Self {
            seen: own(seen),
            unseen: own(unseen),
            irrelevant: own(irrelevant),
        };
        if split.seen.is_empty() {
            return Err(SemanticError::InvalidSplit("no seen classes".into()));
        }
        if split.irrelevant.is_empty() {
            return Err(SemanticError::InvalidSplit("no irrelevant classes".into()));
        }
        let mut all = HashSet::new();
        for c in split.all_classes() {
            if c.is_empty() || c.contains(char::is_whitespace) {
                return Err(SemanticError::InvalidSplit(format!("bad class name `{c}`")));
            }
            if !all.insert(c) {
                return Err(SemanticError::InvalidSplit(format!(
                    "class `{c}` appears in more than one list"
                )));
            }
        }
        Ok(split)
    }

    pub fn seen(&self) -> &[String] {
        &self.seen
    }

    pub fn unseen(&self) -> &[String] {
        &self.unseen
    }

    pub fn irrelevant(&self) -> &[String] {
        &self.irrelevant
    }

    /// Seen followed by irrelevant: the row order of every detection matrix.
    pub fn model_classes(&self) -> impl Iterator<Item = &str> {
        self.seen.iter().chain(&self.irrelevant).map(String::as_str)
    }

    pub fn num_model_classes(&self) -> usize {
        self.seen.len() + self.irrelevant.len()
    }

    /// Row index of `class` in the detection matrix, if it has one.
    pub fn model_row(&self, class: &str) -> Option<usize> {
        self.model_classes().position(|c| c == class)
    }

    /// Seen, then unseen, then irrelevant.
    pub fn all_classes(&self) -> impl Iterator<Item = &str> {
        self.seen
            .iter()
            .chain(&self.unseen)
            .chain(&self.irrelevant)
            .map(String::as_str)
    }

    pub fn role(&self, class: &str) -> Option<ClassRole> {
        if self.seen.iter().any(|c| c == class) {
            Some(ClassRole::Seen)
        } else if self.unseen.iter().any(|c| c == class) {
            Some(ClassRole::Unseen)
        } else if self.irrelevant.iter().any(|c| c == class) {
            Some(ClassRole::Irrelevant)
        } else {
            None
        }
    }

    pub fn is_target_class(&self, class: &str) -> bool {
        matches!(self.role(class), Some(ClassRole::Seen | ClassRole::Unseen))
    }
}

/// Cosine similarity of every model class to `target`, in model-class order.
pub fn similarity_column(
    table: &EmbeddingTable,
    split: &ClassSplit,
    target: &str,
) -> Result<Vec<f64>> {
    let g_t = table.get(target)?;
    split
        .model_classes()
        .map(|c| cosine_similarity(table.get(c)?, g_t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn load_two_rows() {
        let t = parse_embeddings("cup 1.0 0.0\nmug 0.8 0.6\n", &["cup", "mug"]).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("mug").unwrap(), &[0.8, 0.6]);
    }

    #[test]
    fn load_preserves_request_order_and_skips_others() {
        let t = parse_embeddings("a 1 0\nb 0 1\nc 1 1\n", &["c", "a"]).unwrap();
        assert_eq!(t.classes().collect::<Vec<_>>(), vec!["c", "a"]);
    }

    #[test]
    fn load_errors() {
        assert_eq!(
            parse_embeddings("cup 1.0 0.0\n", &["cup", "ghost"]),
            Err(SemanticError::MissingClass("ghost".into()))
        );
        assert_eq!(
            parse_embeddings("cup 0.0 0.0\n", &["cup"]),
            Err(SemanticError::ZeroNormVector("cup".into()))
        );
        assert!(matches!(
            parse_embeddings("cup 1 0\nmug 1 0 0\n", &["cup", "mug"]),
            Err(SemanticError::InconsistentDim { .. })
        ));
        assert!(matches!(
            parse_embeddings("cup 1 zero\n", &["cup"]),
            Err(SemanticError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            parse_embeddings("cup\n", &["cup"]),
            Err(SemanticError::Malformed { .. })
        ));
        assert!(matches!(
            parse_embeddings("cup 1 0\ncup 0 1\n", &["cup"]),
            Err(SemanticError::DuplicateClass(_))
        ));
    }

    #[test]
    fn text_round_trip() {
        let t = synth_embeddings(3, &["a", "b", "c"], 5, &[0, 0, 1]).unwrap();
        let back = parse_embeddings(&t.to_text(), &["a", "b", "c"]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn synth_cluster_bounds_and_determinism() {
        let classes = ["a", "b", "c", "d"];
        let t = synth_embeddings(7, &classes, 8, &[0, 0, 1, 1]).unwrap();
        assert!(t.similarity("a", "b").unwrap() >= 0.7);
        assert!(t.similarity("c", "d").unwrap() >= 0.7);
        assert!(t.similarity("a", "c").unwrap() <= 0.3);
        assert_eq!(t, synth_embeddings(7, &classes, 8, &[0, 0, 1, 1]).unwrap());
        assert_ne!(t, synth_embeddings(8, &classes, 8, &[0, 0, 1, 1]).unwrap());
    }

    #[test]
    fn synth_infeasible_in_two_dims() {
        let names: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let ids: Vec<usize> = (0..10).collect();
        assert!(matches!(
            synth_embeddings(1, &refs, 2, &ids),
            Err(SemanticError::InfeasibleSpec(_))
        ));
    }

    #[test]
    fn ten_planar_unit_vectors_always_have_a_close_pair() {
        // Independent check of the infeasibility above: among 10 directions
        // in the plane, two are within 36 degrees, i.e. cosine >= 0.80.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let angles: Vec<f64> = (0..10)
                .map(|_| rand::Rng::gen_range(&mut rng, 0.0..std::f64::consts::TAU))
                .collect();
            let mut max_cos = f64::NEG_INFINITY;
            for i in 0..10 {
                for j in i + 1..10 {
                    max_cos = max_cos.max((angles[i] - angles[j]).cos());
                }
            }
            assert!(max_cos > CENTROID_MAX_COS);
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((v - 0.974_631_846_197_076_2).abs() < 1e-12);
        assert_eq!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(SemanticError::DimensionMismatch(1, 2))
        );
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]),
            Err(SemanticError::ZeroNorm)
        );
    }

    #[test]
    fn split_validation() {
        assert!(ClassSplit::new(&["a"], &[], &["b"]).is_ok());
        assert!(ClassSplit::new(&["a"], &["a"], &["b"]).is_err());
        assert!(ClassSplit::new::<&str>(&[], &["u"], &["b"]).is_err());
        assert!(ClassSplit::new(&["a"], &["u"], &[]).is_err());
        let s = ClassSplit::new(&["s1", "s2"], &["u"], &["i"]).unwrap();
        assert_eq!(s.model_classes().collect::<Vec<_>>(), vec!["s1", "s2", "i"]);
        assert_eq!(s.model_row("u"), None);
        assert_eq!(s.model_row("i"), Some(2));
    }

    #[test]
    fn similarity_column_examples() {
        let classes = ["s1", "s2", "u", "i"];
        let table = synth_embeddings(5, &classes, 8, &[0, 1, 0, 1]).unwrap();
        let split = ClassSplit::new(&["s1", "s2"], &["u"], &["i"]).unwrap();
        let col = similarity_column(&table, &split, "s2").unwrap();
        assert_eq!(col.len(), 3);
        assert_eq!(col[1], 1.0);

        // Unseen target: recompute each entry directly from the definition.
        let col = similarity_column(&table, &split, "u").unwrap();
        for (value, class) in col.iter().zip(["s1", "s2", "i"]) {
            let (a, b) = (table.get(class).unwrap(), table.get("u").unwrap());
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((value - d / (na * nb)).abs() < 1e-15);
        }
        assert!(col[0] >= SAME_CLUSTER_MIN_COS);
        assert!(col[1] <= CROSS_CLUSTER_MAX_COS);
        assert_eq!(
            similarity_column(&table, &split, "ghost"),
            Err(SemanticError::MissingClass("ghost".into()))
        );
    }

    proptest! {
        #[test]
        fn similarity_column_ignores_table_insertion_order(seed in 0u64..50) {
            let classes = ["s1", "s2", "u", "i1", "i2"];
            let table = synth_embeddings(seed, &classes, 6, &[0, 1, 0, 2, 1]).unwrap();
            let mut shuffled = EmbeddingTable::new(6);
            for c in ["i2", "u", "s2", "i1", "s1"] {
                shuffled.insert(c, table.get(c).unwrap().to_vec()).unwrap();
            }
            let split = ClassSplit::new(&["s1", "s2"], &["u"], &["i1", "i2"]).unwrap();
            for target in ["s1", "u"] {
                prop_assert_eq!(
                    similarity_column(&table, &split, target).unwrap(),
                    similarity_column(&shuffled, &split, target).unwrap()
                );
            }
        }

        #[test]
        fn cosine_scale_invariant_and_symmetric(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            sa in 0.01f64..100.0,
            sb in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let base = cosine_similarity(&a, &b).unwrap();
            let a2: Vec<f64> = a.iter().map(|x| x * sa).collect();
            let b2: Vec<f64> = b.iter().map(|x| x * sb).collect();
            prop_assert!((cosine_similarity(&a2, &b2).unwrap() - base).abs() <= 1e-12);
            prop_assert_eq!(cosine_similarity(&b, &a).unwrap(), base);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }
}
