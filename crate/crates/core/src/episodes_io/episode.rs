use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AfrError, Result};
use crate::numerics::{Matrix, Rng};
use crate::semantics::{select_related, SelectionResult, SemanticTable, DEFAULT_BETA};

use super::FeatureStore;

/// Shape of one N-way-K-shot evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub beta: usize,
    pub episodes: usize,
}

impl EpisodeSpec {
    pub const DEFAULT_N_WAY: usize = 5;
    pub const DEFAULT_K_SHOT: usize = 1;
    pub const DEFAULT_QUERIES: usize = 15;
    pub const DEFAULT_EPISODES: usize = 600;

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("queries_per_class", self.queries_per_class),
            ("episodes", self.episodes),
        ] {
            if v == 0 {
                return Err(AfrError::config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: Self::DEFAULT_N_WAY,
            k_shot: Self::DEFAULT_K_SHOT,
            queries_per_class: Self::DEFAULT_QUERIES,
            beta: DEFAULT_BETA,
            episodes: Self::DEFAULT_EPISODES,
        }
    }
}

/// Mean feature of every base class, computed once and shared read-only.
#[derive(Debug, Clone)]
pub struct BasePrototypes {
    dim: usize,
    means: BTreeMap<String, Vec<f64>>,
}

impl BasePrototypes {
    pub fn from_store(store: &FeatureStore) -> Result<Self> {
        let mut means = BTreeMap::new();
        for class in store.class_names() {
            means.insert(class.to_string(), store.class_matrix(class)?.row_mean());
        }
        Ok(Self {
            dim: store.dim(),
            means,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.means.keys().map(String::as_str).collect()
    }

    pub fn get(&self, class: &str) -> Result<&[f64]> {
        self.means
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| AfrError::data(format!("base class `{class}` has no features")))
    }

    /// Prototype rows for the selected classes, best match first.
    pub fn matrix_for(&self, selection: &SelectionResult) -> Result<Matrix> {
        let rows = selection
            .ranked
            .iter()
            .map(|r| self.get(&r.name))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }
}

/// One sampled task. Support and query rows are class-major: rows
/// `c*K .. (c+1)*K` of `support` belong to label `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub index: u64,
    pub class_names: Vec<String>,
    pub support: Matrix,
    pub support_labels: Vec<usize>,
    pub query: Matrix,
    pub query_labels: Vec<usize>,
    /// Record positions in the novel store, for disjointness checks.
    pub support_records: Vec<usize>,
    pub query_records: Vec<usize>,
    /// Empty when `beta` is 0.
    pub selections: Vec<SelectionResult>,
    /// Prototype matrix (`beta × d`) per class, aligned with `selections`.
    pub prototypes: Vec<Matrix>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_names.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.rows() / self.n_way().max(1)
    }

    pub fn dim(&self) -> usize {
        self.support.cols()
    }

    pub fn beta(&self) -> usize {
        self.prototypes.first().map(Matrix::rows).unwrap_or(0)
    }

    /// Support shots of one class as a `K × d` matrix.
    pub fn class_support(&self, label: usize) -> Matrix {
        let k = self.k_shot();
        let idx: Vec<usize> = (label * k..(label + 1) * k).collect();
        self.support.select_rows(&idx)
    }
}

/// Samples one episode. Classes and records are drawn without replacement;
/// the first `k_shot` records of each class form the support set.
pub fn sample_episode(
    novel: &FeatureStore,
    spec: &EpisodeSpec,
    semantics: Option<&SemanticTable>,
    base: &BasePrototypes,
    index: u64,
    rng: &mut Rng,
) -> Result<Episode> {
    spec.validate()?;
    let classes = novel.class_names();
    if classes.len() < spec.n_way {
        return Err(AfrError::Sampling(format!(
            "{}-way episodes need {} novel classes, store has {}",
            spec.n_way,
            spec.n_way,
            classes.len()
        )));
    }
    let needed = spec.k_shot + spec.queries_per_class;
    let short: Vec<String> = classes
        .iter()
        .filter_map(|c| {
            let have = novel.indices_of(c).map(|i| i.len()).unwrap_or(0);
            (have < needed).then(|| format!("`{c}` has {have}"))
        })
        .collect();
    if !short.is_empty() {
        return Err(AfrError::Sampling(format!(
            "every novel class needs {needed} records ({} shots + {} queries): {}",
            spec.k_shot,
            spec.queries_per_class,
            short.join(", ")
        )));
    }
    if spec.beta > 0 && semantics.is_none() {
        return Err(AfrError::config("beta > 0 requires label embeddings"));
    }

    let picked = rng.sample_indices(classes.len(), spec.n_way);
    let class_names: Vec<String> = picked.iter().map(|&i| classes[i].to_string()).collect();

    let d = novel.dim();
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot * d);
    let mut query = Vec::with_capacity(spec.n_way * spec.queries_per_class * d);
    let mut support_records = Vec::new();
    let mut query_records = Vec::new();
    let mut support_labels = Vec::new();
    let mut query_labels = Vec::new();
    for (label, class) in class_names.iter().enumerate() {
        let records = novel.indices_of(class)?;
        let chosen = rng.sample_indices(records.len(), needed);
        for (n, &c) in chosen.iter().enumerate() {
            let rec = records[c];
            if n < spec.k_shot {
                support.extend_from_slice(novel.feature(rec));
                support_records.push(rec);
                support_labels.push(label);
            } else {
                query.extend_from_slice(novel.feature(rec));
                query_records.push(rec);
                query_labels.push(label);
            }
        }
    }

    let mut selections = Vec::new();
    let mut prototypes = Vec::new();
    if spec.beta > 0 {
        let table = semantics.expect("checked above");
        let base_classes = base.class_names();
        for class in &class_names {
            let sel = select_related(class, table, &base_classes, spec.beta)?;
            prototypes.push(base.matrix_for(&sel)?);
            selections.push(sel);
        }
    }

    Ok(Episode {
        index,
        class_names,
        support: Matrix::new(support_labels.len(), d, support)?,
        support_labels,
        query: Matrix::new(query_labels.len(), d, query)?,
        query_labels,
        support_records,
        query_records,
        selections,
        prototypes,
    })
}
