//! Data plumbing: feature stores and their file formats, synthetic data,
//! episode sampling, the mixup baseline and the multi-episode protocol.

mod episode;
mod mixup;
mod protocol;
mod store;
pub mod synth;

pub use episode::{sample_episode, BasePrototypes, Episode, EpisodeSpec};
pub use mixup::{mixup_features, sample_lambda, MixedSample};
pub use protocol::{
    format_summary, mean_ci95, paired_difference, run_protocol, RunConfig, RunReport,
    MAX_FAILURE_RATE,
};
pub use store::{
    load_feature_store, save_feature_store, FeatureRecord, FeatureStore, FORMAT_VERSION,
    HEADER_LEN, MAGIC,
};
pub use synth::{synth_benchmark, synth_generate, SynthConfig};
