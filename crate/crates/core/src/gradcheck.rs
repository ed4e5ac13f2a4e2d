//! Analytic-versus-numerical gradient comparison on random miniature
//! episodes, reported per parameter block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AfrError, Result};
use crate::losses::LossConfig;
use crate::numerics::{finite_diff_grad, relative_error, Matrix, Rng, DEFAULT_FD_STEP};
use crate::regularizer::AttentionSwitches;
use crate::trainer::{loss_and_grad, loss_value, AfrParams, EpisodeProblem};

pub const BLOCK_NAMES: [&str; 7] = ["W_q", "W_k", "W_v", "W_p", "FC1", "FC2", "classifier"];
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub dim: usize,
    pub beta: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub reduction: usize,
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub loss: LossConfig,
    /// Test hook: scale the analytic gradient of this block by 1.01.
    pub perturb_block: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            beta: 3,
            n_way: 3,
            k_shot: 2,
            reduction: 4,
            trials: 10,
            seed: 0,
            step: DEFAULT_FD_STEP,
            tolerance: DEFAULT_TOLERANCE,
            loss: LossConfig::default(),
            perturb_block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub block: String,
    pub params: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub blocks: Vec<BlockResult>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing_blocks(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| !b.passed)
            .map(|b| b.block.as_str())
            .collect()
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    m.data_mut().iter_mut().for_each(|v| *v = scale * rng.normal());
    m
}

/// A random episode problem and parameter set of the requested size.
pub fn random_instance(cfg: &GradCheckConfig, rng: &mut Rng) -> Result<(EpisodeProblem, AfrParams)> {
    let support: Vec<Matrix> = (0..cfg.n_way)
        .map(|_| random_matrix(cfg.k_shot, cfg.dim, 1.0, rng))
        .collect();
    let queries = support.iter().map(Matrix::row_mean).collect();
    let prototypes = (0..cfg.n_way)
        .map(|_| random_matrix(cfg.beta, cfg.dim, 1.0, rng))
        .collect();
    let mut params = AfrParams::init(cfg.dim, cfg.n_way, cfg.reduction, rng)?;
    params.classifier.weights = random_matrix(cfg.n_way, cfg.dim, 0.5, rng);
    params.classifier.bias = (0..cfg.n_way).map(|_| 0.1 * rng.normal()).collect();
    params.channel.b_fc1.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
    params.channel.b_fc2.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
    Ok((
        EpisodeProblem {
            support,
            queries,
            prototypes,
        },
        params,
    ))
}

/// Runs `cfg.trials` random instances and reports the worst relative error
/// per block.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.beta == 0 || cfg.n_way < 2 || cfg.k_shot == 0 || cfg.trials == 0 {
        return Err(AfrError::config(
            "gradcheck needs beta >= 1, n_way >= 2, k_shot >= 1, trials >= 1",
        ));
    }
    if let Some(b) = &cfg.perturb_block {
        if !BLOCK_NAMES.contains(&b.as_str()) {
            return Err(AfrError::config(format!("unknown block `{b}`")));
        }
    }
    let switches = AttentionSwitches::default();
    let mut worst: BTreeMap<&str, (usize, f64)> = BTreeMap::new();

    for trial in 0..cfg.trials {
        let mut rng = Rng::new(cfg.seed, trial as u64);
        let (problem, params) = random_instance(cfg, &mut rng)?;
        let (_, grads) = loss_and_grad(&problem, &params, switches, &cfg.loss, &[])?;
        let analytic = grads.to_flat();

        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |flat| {
                probe.set_flat(flat).expect("same layout");
                loss_value(&problem, &probe, switches, &cfg.loss)
                    .map(|b| b.total)
                    .unwrap_or(f64::NAN)
            },
            &params.to_flat(),
            cfg.step,
        )?;

        let mut at = 0;
        for (name, block) in params.blocks() {
            let entry = worst.entry(name).or_insert((0, 0.0));
            if trial == 0 {
                entry.0 += block.len();
            }
            let scale = if cfg.perturb_block.as_deref() == Some(name) { 1.01 } else { 1.0 };
            for i in at..at + block.len() {
                entry.1 = entry.1.max(relative_error(scale * analytic[i], numeric[i]));
            }
            at += block.len();
        }
    }

    let blocks: Vec<BlockResult> = BLOCK_NAMES
        .iter()
        .map(|&name| {
            let (params, err) = worst[name];
            BlockResult {
                block: name.to_string(),
                params,
                max_relative_error: err,
                passed: err < cfg.tolerance,
            }
        })
        .collect();
    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradCheckReport {
        config: cfg.clone(),
        blocks,
        passed,
    })
}
