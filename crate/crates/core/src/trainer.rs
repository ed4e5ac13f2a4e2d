//! Per-episode training of the attention blocks and the classifier, and
//! query-set inference with the classifier alone.

use serde::{Deserialize, Serialize};

use crate::episodes_io::{mixup_features, sample_lambda, Episode, MixedSample};
use crate::error::{AfrError, Result};
use crate::losses::{total_loss_with_grad, Classifier, LossBreakdown, LossConfig, LossGradients};
use crate::numerics::{adam_step, AdamState, Matrix, Rng};
use crate::regularizer::{
    fuse_prototypes, fuse_prototypes_backward, AttentionSwitches, ChannelAttentionParams,
    FusionCache, InstanceAttentionParams, RegularizedSet, DEFAULT_REDUCTION,
};

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub instance_attention: bool,
    pub channel_attention: bool,
    pub sc_loss: bool,
    pub mse_loss: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        instance_attention: true,
        channel_attention: true,
        sc_loss: true,
        mse_loss: true,
    };

    pub const NONE: Ablation = Ablation {
        instance_attention: false,
        channel_attention: false,
        sc_loss: false,
        mse_loss: false,
    };

    pub fn switches(&self) -> AttentionSwitches {
        AttentionSwitches {
            instance: self.instance_attention,
            channel: self.channel_attention,
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

/// Extra regularizer applied to the support set, for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineRegularizer {
    #[default]
    None,
    /// Each epoch adds one mixed copy of every support row, paired with a
    /// random support row, lambda ~ Beta(1, 1).
    Mixup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub ablation: Ablation,
    pub reduction: usize,
    pub baseline: BaselineRegularizer,
    pub seed: u64,
}

impl TrainConfig {
    pub const DEFAULT_EPOCHS: usize = 1000;

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(AfrError::config("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AfrError::config("learning rate must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(AfrError::config("weight decay must be >= 0"));
        }
        self.loss.validate()
    }

    /// Loss weights with ablated terms set to zero.
    pub fn effective_loss(&self) -> LossConfig {
        let mut cfg = self.loss.clone();
        if !self.ablation.sc_loss {
            cfg.mu1 = 0.0;
        }
        if !self.ablation.mse_loss {
            cfg.mu2 = 0.0;
        }
        cfg
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: Self::DEFAULT_EPOCHS,
            learning_rate: AdamState::DEFAULT_LEARNING_RATE,
            weight_decay: AdamState::DEFAULT_WEIGHT_DECAY,
            loss: LossConfig::default(),
            ablation: Ablation::FULL,
            reduction: DEFAULT_REDUCTION,
            baseline: BaselineRegularizer::None,
            seed: 0,
        }
    }
}

/// Every trainable tensor of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfrParams {
    pub instance: InstanceAttentionParams,
    pub channel: ChannelAttentionParams,
    pub classifier: Classifier,
}

impl AfrParams {
    /// Random attention weights, zero classifier.
    pub fn init(dim: usize, n_way: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        let instance = InstanceAttentionParams::init(dim, rng);
        let channel = ChannelAttentionParams::init(dim, reduction, rng)?;
        Ok(Self {
            instance,
            channel,
            classifier: Classifier::zeros(n_way, dim),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            instance: InstanceAttentionParams::zeros(self.instance.dim()),
            channel: self.channel.zeros_like(),
            classifier: Classifier::zeros(self.classifier.num_classes(), self.classifier.dim()),
        }
    }

    /// Named views of every parameter block, in flattening order.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("W_q", self.instance.w_q.data()),
            ("W_k", self.instance.w_k.data()),
            ("W_v", self.instance.w_v.data()),
            ("W_p", self.instance.w_p.data()),
            ("FC1", self.channel.w_fc1.data()),
            ("FC1", &self.channel.b_fc1),
            ("FC2", self.channel.w_fc2.data()),
            ("FC2", &self.channel.b_fc2),
            ("classifier", self.classifier.weights.data()),
            ("classifier", &self.classifier.bias),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.instance.w_q.data_mut(),
            self.instance.w_k.data_mut(),
            self.instance.w_v.data_mut(),
            self.instance.w_p.data_mut(),
            self.channel.w_fc1.data_mut(),
            &mut self.channel.b_fc1,
            self.channel.w_fc2.data_mut(),
            &mut self.channel.b_fc2,
            self.classifier.weights.data_mut(),
            &mut self.classifier.bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, b) in self.blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(AfrError::shape(format!(
                "flat vector has {} entries, parameters need {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for b in self.blocks_mut() {
            b.copy_from_slice(&flat[at..at + b.len()]);
            at += b.len();
        }
        Ok(())
    }
}

/// Per-episode inputs that do not change during training.
#[derive(Debug, Clone)]
pub struct EpisodeProblem {
    /// `K × d` support shots per class.
    pub support: Vec<Matrix>,
    /// Attention query per class: the mean of its shots.
    pub queries: Vec<Vec<f64>>,
    /// `β × d` related-class prototypes per class; empty when β = 0.
    pub prototypes: Vec<Matrix>,
}

impl EpisodeProblem {
    pub fn from_episode(ep: &Episode) -> Self {
        let support: Vec<Matrix> = (0..ep.n_way()).map(|c| ep.class_support(c)).collect();
        let queries = support.iter().map(Matrix::row_mean).collect();
        Self {
            support,
            queries,
            prototypes: ep.prototypes.clone(),
        }
    }

    pub fn n_way(&self) -> usize {
        self.support.len()
    }

    pub fn dim(&self) -> usize {
        self.support.first().map(Matrix::cols).unwrap_or(0)
    }
}

/// Builds every class's regularized set from the current parameters.
pub fn forward_sets(
    problem: &EpisodeProblem,
    params: &AfrParams,
    switches: AttentionSwitches,
) -> Result<(Vec<RegularizedSet>, Vec<Option<FusionCache>>)> {
    let mut sets = Vec::with_capacity(problem.n_way());
    let mut caches = Vec::with_capacity(problem.n_way());
    for c in 0..problem.n_way() {
        let (fused, cache) = match problem.prototypes.get(c) {
            Some(p) if p.rows() > 0 => {
                let (f, cache) = fuse_prototypes(
                    &problem.queries[c],
                    p,
                    &params.instance,
                    &params.channel,
                    switches,
                )?;
                (f, Some(cache))
            }
            _ => (Matrix::zeros(0, problem.dim()), None),
        };
        sets.push(RegularizedSet {
            support_features: problem.support[c].clone(),
            fused_prototypes: fused,
            label: c,
        });
        caches.push(cache);
    }
    Ok((sets, caches))
}

/// Objective value and gradient with respect to every parameter.
pub fn loss_and_grad(
    problem: &EpisodeProblem,
    params: &AfrParams,
    switches: AttentionSwitches,
    loss_cfg: &LossConfig,
    mixed: &[MixedSample],
) -> Result<(LossBreakdown, AfrParams)> {
    let (sets, caches) = forward_sets(problem, params, switches)?;
    let mut lg = LossGradients::zeros_for(&sets, &params.classifier);
    let breakdown = total_loss_with_grad(&sets, mixed, &params.classifier, loss_cfg, &mut lg)?;
    let mut grads = params.zeros_like();
    grads.classifier = lg.classifier;
    for (c, cache) in caches.iter().enumerate() {
        if let Some(cache) = cache {
            fuse_prototypes_backward(
                cache,
                &problem.prototypes[c],
                &params.instance,
                &params.channel,
                &lg.sets[c].fused,
                &mut grads.instance,
                &mut grads.channel,
            );
        }
    }
    Ok((breakdown, grads))
}

/// Objective value only, for finite-difference probes.
pub fn loss_value(
    problem: &EpisodeProblem,
    params: &AfrParams,
    switches: AttentionSwitches,
    loss_cfg: &LossConfig,
) -> Result<LossBreakdown> {
    loss_and_grad(problem, params, switches, loss_cfg, &[]).map(|(b, _)| b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub classifier: Classifier,
    pub instance: InstanceAttentionParams,
    pub channel: ChannelAttentionParams,
    pub loss_trace: Vec<LossBreakdown>,
}

/// Training randomness lives on its own seed so it never overlaps the
/// sampling stream of the same episode.
pub fn training_rng(seed: u64, episode: u64) -> Rng {
    Rng::new(seed ^ 0x9E37_79B9_7F4A_7C15, episode)
}

/// Full-batch Adam on the episode's support set and fused prototypes.
pub fn train_episode(ep: &Episode, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let switches = cfg.ablation.switches();
    if ep.beta() > 0 && ep.prototypes.len() != ep.n_way() {
        return Err(AfrError::config("episode is missing related-class prototypes"));
    }
    if cfg.ablation.mse_loss && cfg.loss.mu2 > 0.0 && ep.beta() == 0 {
        return Err(AfrError::config(
            "the mean-gap loss needs beta >= 1; disable it for beta 0",
        ));
    }
    let problem = EpisodeProblem::from_episode(ep);
    let loss_cfg = cfg.effective_loss();
    let mut rng = training_rng(cfg.seed, ep.index);
    let mut params = AfrParams::init(ep.dim(), ep.n_way(), cfg.reduction, &mut rng)?;
    let mut adam = AdamState::new(params.num_params(), cfg.learning_rate, cfg.weight_decay);
    let mut flat = params.to_flat();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mixed = match cfg.baseline {
            BaselineRegularizer::None => Vec::new(),
            BaselineRegularizer::Mixup => mix_support(ep, &mut rng)?,
        };
        let (breakdown, grads) = loss_and_grad(&problem, &params, switches, &loss_cfg, &mixed)?;
        if !breakdown.is_finite() {
            return Err(AfrError::Divergence { epoch });
        }
        trace.push(breakdown);
        adam_step(&mut flat, &grads.to_flat(), &mut adam)?;
        params.set_flat(&flat)?;
    }

    Ok(TrainedModel {
        classifier: params.classifier,
        instance: params.instance,
        channel: params.channel,
        loss_trace: trace,
    })
}

fn mix_support(ep: &Episode, rng: &mut Rng) -> Result<Vec<MixedSample>> {
    let n = ep.support.rows();
    let partners = rng.sample_indices(n, n);
    (0..n)
        .zip(partners)
        .map(|(i, j)| {
            let lambda = sample_lambda(rng);
            mixup_features(
                ep.support.row(i),
                ep.support_labels[i],
                ep.support.row(j),
                ep.support_labels[j],
                lambda,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub logits: Vec<f64>,
}

/// Classifies one query feature. Ties go to the lowest class index.
pub fn predict(model: &TrainedModel, query: &[f64]) -> Result<Prediction> {
    if query.len() != model.classifier.dim() {
        return Err(AfrError::shape(format!(
            "query has dim {}, classifier expects {}",
            query.len(),
            model.classifier.dim()
        )));
    }
    let logits = model.classifier.logits(query);
    let mut class = 0;
    for (c, &l) in logits.iter().enumerate() {
        if l > logits[class] {
            class = c;
        }
    }
    Ok(Prediction { class, logits })
}

/// Fraction of query rows classified correctly.
pub fn evaluate_episode(model: &TrainedModel, ep: &Episode) -> Result<f64> {
    if ep.query.rows() == 0 {
        return Err(AfrError::config("episode has no queries"));
    }
    let mut correct = 0usize;
    for (row, &label) in ep.query.iter_rows().zip(&ep.query_labels) {
        if predict(model, row)?.class == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ep.query.rows() as f64)
}
