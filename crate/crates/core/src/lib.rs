//! Attentive feature regularization for few-shot classification.
//!
//! Works on pre-extracted feature vectors. For every novel class in an
//! N-way-K-shot episode, the prototypes of the most semantically related
//! base classes are calibrated towards the support shots by an instance
//! attention block, re-weighted per channel by a squeeze-excite gate and
//! added to the training set under the novel label. A linear classifier is
//! then trained on support features and fused prototypes with
//! cross-entropy, supervised contrastive and mean-gap losses.

pub mod episodes_io;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod numerics;
pub mod regularizer;
pub mod semantics;
pub mod trainer;

pub use error::{AfrError, Result};
