//! Synthetic feature stores whose class geometry follows the label
//! embeddings.
//!
//! Classes are grouped into super-categories. A class embedding is its
//! group centre plus `cluster_spread`-scaled Gaussian jitter, projected to
//! the unit sphere. The class feature mean is `mean_norm · A s` for one
//! fixed random map `A` with orthonormal columns (when `feat_dim >=
//! sem_dim`), so feature-mean cosines equal embedding cosines. Samples add
//! isotropic Gaussian noise of standard deviation `noise`.

use serde::{Deserialize, Serialize};

use crate::error::{AfrError, Result};
use crate::numerics::Rng;
use crate::semantics::SemanticTable;

use super::FeatureStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub feat_dim: usize,
    pub sem_dim: usize,
    pub groups: usize,
    pub cluster_spread: f64,
    pub mean_norm: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 30,
            per_class: 60,
            feat_dim: 32,
            sem_dim: 16,
            groups: 5,
            cluster_spread: 0.5,
            mean_norm: 2.0,
            noise: 0.3,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("per_class", self.per_class),
            ("feat_dim", self.feat_dim),
            ("sem_dim", self.sem_dim),
            ("groups", self.groups),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(AfrError::config(format!("synthetic {name} must be >= 1")));
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("mean_norm", self.mean_norm),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AfrError::config(format!("synthetic {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

pub fn class_name(i: usize) -> String {
    format!("class_{i:03}")
}

fn unit_gaussian(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `feat_dim × sem_dim` map; columns orthonormal when `feat_dim >= sem_dim`.
fn projection(feat_dim: usize, sem_dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(sem_dim);
    for j in 0..sem_dim {
        let mut v: Vec<f64> = (0..feat_dim).map(|_| rng.normal()).collect();
        if j < feat_dim {
            for _ in 0..2 {
                for c in &cols {
                    let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|x| x / n).collect());
    }
    cols
}

/// Generates `classes` classes named `class_000`, `class_001`, ... with
/// `per_class` features each, plus their label embeddings. Class `i`
/// belongs to group `i % groups`.
pub fn synth_generate(cfg: &SynthConfig, rng: &mut Rng) -> Result<(FeatureStore, SemanticTable)> {
    cfg.validate()?;
    let a = projection(cfg.feat_dim, cfg.sem_dim, rng);
    let centres: Vec<Vec<f64>> = (0..cfg.groups).map(|_| unit_gaussian(cfg.sem_dim, rng)).collect();
    let jitter = cfg.cluster_spread / (cfg.sem_dim as f64).sqrt();

    let mut table = SemanticTable::new(cfg.sem_dim)?;
    let mut store = FeatureStore::new(cfg.feat_dim)?;
    for c in 0..cfg.classes {
        let centre = &centres[c % cfg.groups];
        let mut s: Vec<f64> = centre.iter().map(|x| x + jitter * rng.normal()).collect();
        let n = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            s = unit_gaussian(cfg.sem_dim, rng);
        } else {
            s.iter_mut().for_each(|x| *x /= n);
        }
        let mut mean = vec![0.0; cfg.feat_dim];
        for (col, &sj) in a.iter().zip(&s) {
            for (m, &v) in mean.iter_mut().zip(col) {
                *m += cfg.mean_norm * sj * v;
            }
        }
        let name = class_name(c);
        table.insert(name.clone(), s)?;
        for _ in 0..cfg.per_class {
            // stored as f32 on disk; round now so files round-trip exactly
            let f: Vec<f64> = mean
                .iter()
                .map(|m| ((m + cfg.noise * rng.normal()) as f32) as f64)
                .collect();
            store.push(name.clone(), f)?;
        }
    }
    Ok((store, table))
}

/// Splits a store by class name, returning (selected, rest).
pub fn split_classes(store: &FeatureStore, selected: &[String]) -> Result<(FeatureStore, FeatureStore)> {
    let mut a = FeatureStore::new(store.dim())?;
    let mut b = FeatureStore::new(store.dim())?;
    for rec in store.records() {
        let target = if selected.contains(&rec.class_name) { &mut a } else { &mut b };
        target.push(rec.class_name.clone(), rec.feature.clone())?;
    }
    Ok((a, b))
}

/// Default synthetic benchmark: the last `novel_classes` classes form the
/// novel store, the rest the base store.
pub fn synth_benchmark(
    cfg: &SynthConfig,
    novel_classes: usize,
    seed: u64,
) -> Result<(FeatureStore, FeatureStore, SemanticTable)> {
    if novel_classes == 0 || novel_classes >= cfg.classes {
        return Err(AfrError::config(format!(
            "novel classes {novel_classes} must be in [1, {})",
            cfg.classes
        )));
    }
    let mut rng = Rng::new(seed, u64::MAX);
    let (store, table) = synth_generate(cfg, &mut rng)?;
    let novel: Vec<String> = (cfg.classes - novel_classes..cfg.classes).map(class_name).collect();
    let (novel_store, base_store) = split_classes(&store, &novel)?;
    Ok((base_store, novel_store, table))
}
