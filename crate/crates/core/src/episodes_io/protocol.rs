//! Many-episode evaluation with mean and 95% confidence interval.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AfrError, Result};
use crate::numerics::Rng;
use crate::semantics::SemanticTable;
use crate::trainer::{evaluate_episode, train_episode, TrainConfig};

use super::{sample_episode, BasePrototypes, EpisodeSpec, FeatureStore};

/// Share of failed episodes above which a run is considered unusable.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub episode: EpisodeSpec,
    pub train: TrainConfig,
}

/// Aggregate of one protocol run. `mean` and `ci95` are percentages;
/// `per_episode` holds fractions in `[0, 1]` for the episodes that trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub per_episode: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub failures: usize,
    pub failed_episodes: Vec<u64>,
    pub summary: String,
}

impl RunReport {
    pub fn from_accuracies(config: RunConfig, per_episode: Vec<f64>, failed_episodes: Vec<u64>) -> Self {
        let (mean, ci95) = mean_ci95(&per_episode);
        let (mean, ci95) = (100.0 * mean, 100.0 * ci95);
        Self {
            config,
            summary: format_summary(mean, ci95),
            per_episode,
            mean,
            ci95,
            failures: failed_episodes.len(),
            failed_episodes,
        }
    }

    pub fn failure_rate(&self) -> f64 {
        let total = self.per_episode.len() + self.failures;
        if total == 0 {
            0.0
        } else {
            self.failures as f64 / total as f64
        }
    }

    pub fn too_many_failures(&self) -> bool {
        self.failure_rate() > MAX_FAILURE_RATE
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Accuracy per episode index; `None` for failed episodes.
    pub fn by_episode(&self) -> Vec<Option<f64>> {
        let total = self.per_episode.len() + self.failures;
        let mut out = vec![None; total];
        let mut acc = self.per_episode.iter();
        for (i, slot) in out.iter_mut().enumerate() {
            if !self.failed_episodes.contains(&(i as u64)) {
                *slot = acc.next().copied();
            }
        }
        out
    }
}

/// `"MM.MM ± C.CC%"`.
pub fn format_summary(mean: f64, ci95: f64) -> String {
    format!("{mean:.2} ± {ci95:.2}%")
}

/// Mean and `1.96 · s / √T` with the Bessel-corrected sample deviation.
/// Fewer than two values give an interval of 0.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let t = values.len();
    if t == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / t as f64;
    if t < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
    (mean, 1.96 * var.sqrt() / (t as f64).sqrt())
}

/// Mean and 95% interval (percentage points) of `a - b` over the episodes
/// both runs completed.
pub fn paired_difference(a: &RunReport, b: &RunReport) -> (f64, f64) {
    let diffs: Vec<f64> = a
        .by_episode()
        .into_iter()
        .zip(b.by_episode())
        .filter_map(|(x, y)| Some(x? - y?))
        .collect();
    let (m, c) = mean_ci95(&diffs);
    (100.0 * m, 100.0 * c)
}

/// Samples, trains and scores `spec.episodes` episodes.
///
/// Episode `i` draws from stream `i` of the master seed, so the report does
/// not depend on `workers`. A diverging episode is recorded as a failure;
/// any other error aborts the run.
pub fn run_protocol(
    base: &FeatureStore,
    novel: &FeatureStore,
    semantics: Option<&SemanticTable>,
    spec: &EpisodeSpec,
    train_cfg: &TrainConfig,
    workers: usize,
) -> Result<RunReport> {
    spec.validate()?;
    train_cfg.validate()?;
    if base.dim() != novel.dim() {
        return Err(AfrError::data(format!(
            "base features have dim {}, novel features {}",
            base.dim(),
            novel.dim()
        )));
    }
    let base_protos = BasePrototypes::from_store(base)?;

    let run_one = |i: usize| -> Result<Option<f64>> {
        let mut rng = Rng::new(train_cfg.seed, i as u64);
        let ep = sample_episode(novel, spec, semantics, &base_protos, i as u64, &mut rng)?;
        match train_episode(&ep, train_cfg) {
            Ok(model) => evaluate_episode(&model, &ep).map(Some),
            Err(AfrError::Divergence { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let results: Vec<Result<Option<f64>>> = if workers <= 1 {
        (0..spec.episodes).map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| AfrError::config(format!("worker pool: {e}")))?;
        pool.install(|| (0..spec.episodes).into_par_iter().map(run_one).collect())
    };

    let mut accuracies = Vec::with_capacity(spec.episodes);
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Some(acc) => accuracies.push(acc),
            None => failed.push(i as u64),
        }
    }
    Ok(RunReport::from_accuracies(
        RunConfig {
            episode: spec.clone(),
            train: train_cfg.clone(),
        },
        accuracies,
        failed,
    ))
}
