//! Label embeddings and semantic selection of related base classes.
//!
//! Each class name maps to one embedding vector loaded from a JSON file of
//! the form `{"dim": D, "embeddings": {"<class>": [D reals], ...}}`. For a
//! novel class, [`select_related`] ranks every base class by cosine
//! similarity of the embeddings and keeps the `beta` best.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{AfrError, Result};

pub const DEFAULT_BETA: usize = 3;

/// Class name → label embedding. Read-only once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl SemanticTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(AfrError::config("embedding dim must be >= 1"));
        }
        Ok(Self {
            dim,
            entries: BTreeMap::new(),
        })
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

    pub fn insert(&mut self, name: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let name = name.into();
        if vector.len() != self.dim {
            return Err(AfrError::data(format!(
                "embedding `{name}` has length {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(AfrError::data(format!("embedding `{name}` is not finite")));
        }
        if norm(&vector) == 0.0 {
            return Err(AfrError::data(format!("embedding `{name}` has zero norm")));
        }
        if self.entries.contains_key(&name) {
            return Err(AfrError::data(format!("duplicate embedding for `{name}`")));
        }
        self.entries.insert(name, vector);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.entries
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| AfrError::Lookup(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Class names in ascending order.
    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: EmbeddingFile =
            serde_json::from_str(text).map_err(|e| AfrError::data(format!("embedding JSON: {e}")))?;
        let mut table = Self::new(file.dim)?;
        for (name, vector) in file.embeddings.0 {
            table.insert(name, vector)?;
        }
        Ok(table)
    }

    pub fn to_json_string(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            dim: usize,
            embeddings: &'a BTreeMap<String, Vec<f64>>,
        }
        serde_json::to_string(&Out {
            dim: self.dim,
            embeddings: &self.entries,
        })
        .expect("embedding table serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingFile {
    dim: usize,
    embeddings: OrderedEntries,
}

/// JSON object kept as an ordered list so duplicate keys are visible.
struct OrderedEntries(Vec<(String, Vec<f64>)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping class names to vectors")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<f64>>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity `<a, b> / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_relation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AfrError::shape(format!(
            "cosine_relation: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(AfrError::numeric("cosine_relation: zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelatedClass {
    pub name: String,
    pub score: f64,
}

/// The `beta` base classes most related to `novel_class`, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub novel_class: String,
    pub ranked: Vec<RelatedClass>,
    pub beta: usize,
}

impl SelectionResult {
    pub fn class_names(&self) -> Vec<&str> {
        self.ranked.iter().map(|r| r.name.as_str()).collect()
    }
}

/// Ranks every base class against `novel_class` and keeps the top `beta`.
///
/// Scores are sorted descending; equal scores fall back to ascending class
/// name. The novel class itself is never selected.
pub fn select_related<S: AsRef<str>>(
    novel_class: &str,
    table: &SemanticTable,
    base_classes: &[S],
    beta: usize,
) -> Result<SelectionResult> {
    let target = table.get(novel_class)?;
    let candidates: BTreeSet<&str> = base_classes
        .iter()
        .map(AsRef::as_ref)
        .filter(|&c| c != novel_class)
        .collect();
    if beta == 0 || beta > candidates.len() {
        return Err(AfrError::config(format!(
            "beta {beta} outside [1, {}] for `{novel_class}`",
            candidates.len()
        )));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for name in candidates {
        let score = cosine_relation(target, table.get(name)?)?;
        scored.push(RelatedClass {
            name: name.to_string(),
            score,
        });
    }
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.name.cmp(&b.name)));
    scored.truncate(beta);
    Ok(SelectionResult {
        novel_class: novel_class.to_string(),
        ranked: scored,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_relation(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_relation(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_relation(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_relation(&[0.0, 0.0], &[1.0, 0.0]),
            Err(AfrError::NumericDomain(_))
        ));
        assert!(matches!(
            cosine_relation(&[1.0], &[1.0, 0.0]),
            Err(AfrError::Shape(_))
        ));
    }

    /// Table where each base class has a prescribed cosine to `novel`:
    /// novel = e0, class with score s = [s, sqrt(1 - s^2)].
    fn table_with_scores(scores: &[(&str, f64)]) -> SemanticTable {
        let mut t = SemanticTable::new(2).unwrap();
        t.insert("novel", vec![1.0, 0.0]).unwrap();
        for &(name, s) in scores {
            t.insert(name, vec![s, (1.0 - s * s).sqrt()]).unwrap();
        }
        t
    }

    #[test]
    fn tie_broken_by_name() {
        let t = table_with_scores(&[("c", 0.9), ("b", 0.2), ("a", 0.9), ("d", 0.5)]);
        let sel = select_related("novel", &t, &["a", "b", "c", "d"], 2).unwrap();
        assert_eq!(sel.class_names(), vec!["a", "c"]);
        assert_eq!(sel.beta, 2);
    }

    #[test]
    fn full_selection_is_sorted() {
        let t = table_with_scores(&[("c", 0.9), ("b", 0.2), ("a", 0.9), ("d", 0.5)]);
        let sel = select_related("novel", &t, &["a", "b", "c", "d"], 4).unwrap();
        assert_eq!(sel.class_names(), vec!["a", "c", "d", "b"]);
    }

    #[test]
    fn selection_errors() {
        let t = table_with_scores(&[("a", 0.1)]);
        assert!(matches!(
            select_related("novel", &t, &["a"], 2),
            Err(AfrError::Config(_))
        ));
        assert!(matches!(
            select_related("novel", &t, &["a"], 0),
            Err(AfrError::Config(_))
        ));
        match select_related("novel", &t, &["a", "ghost"], 1) {
            Err(AfrError::Lookup(name)) => assert_eq!(name, "ghost"),
            other => panic!("expected lookup error, got {other:?}"),
        }
        assert!(matches!(
            select_related("missing", &t, &["a"], 1),
            Err(AfrError::Lookup(_))
        ));
    }

    #[test]
    fn novel_class_is_excluded() {
        let t = table_with_scores(&[("a", 0.1)]);
        let sel = select_related("novel", &t, &["novel", "a"], 1).unwrap();
        assert_eq!(sel.class_names(), vec!["a"]);
    }

    #[test]
    fn json_loader() {
        let t = SemanticTable::from_json_str(
            r#"{"dim": 2, "embeddings": {"golden retriever": [1, 0], "cat": [0.5, 0.5]}}"#,
        )
        .unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("golden retriever").unwrap(), &[1.0, 0.0]);

        let back = SemanticTable::from_json_str(&t.to_json_string()).unwrap();
        assert_eq!(back, t);

        let dup = r#"{"dim": 1, "embeddings": {"a": [1], "a": [2]}}"#;
        assert!(matches!(SemanticTable::from_json_str(dup), Err(AfrError::Data(_))));
        let bad_len = r#"{"dim": 2, "embeddings": {"a": [1]}}"#;
        assert!(matches!(SemanticTable::from_json_str(bad_len), Err(AfrError::Data(_))));
        let zero = r#"{"dim": 2, "embeddings": {"a": [0, 0]}}"#;
        assert!(matches!(SemanticTable::from_json_str(zero), Err(AfrError::Data(_))));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10f64..10.0, 4),
            b in prop::collection::vec(-10f64..10.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ab = cosine_relation(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_relation(&b, &a).unwrap());
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            prop_assert!((cosine_relation(&scaled, &b).unwrap() - ab).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
