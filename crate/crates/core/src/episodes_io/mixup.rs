//! Feature-level mixup, kept as a comparison baseline.

use crate::error::{AfrError, Result};
use crate::numerics::Rng;

/// An interpolated feature with soft label `lambda` on `class_a` and
/// `1 - lambda` on `class_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub feature: Vec<f64>,
    pub class_a: usize,
    pub class_b: usize,
    pub lambda: f64,
}

pub fn mixup_features(
    a: &[f64],
    class_a: usize,
    b: &[f64],
    class_b: usize,
    lambda: f64,
) -> Result<MixedSample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AfrError::config(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    if a.len() != b.len() {
        return Err(AfrError::shape(format!(
            "mixup of features with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(MixedSample {
        feature: a
            .iter()
            .zip(b)
            .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
            .collect(),
        class_a,
        class_b,
        lambda,
    })
}

/// Mixing coefficient drawn from Beta(1, 1).
pub fn sample_lambda(rng: &mut Rng) -> f64 {
    rng.beta(1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{mixed_cross_entropy, Classifier};
    use crate::numerics::Matrix;

    #[test]
    fn endpoints_and_midpoint() {
        let a = [2.0, 0.0];
        let b = [0.0, 2.0];
        assert_eq!(mixup_features(&a, 0, &b, 1, 1.0).unwrap().feature, a.to_vec());
        assert_eq!(mixup_features(&a, 0, &b, 1, 0.5).unwrap().feature, vec![1.0, 1.0]);
        assert!(mixup_features(&a, 0, &b, 1, 1.5).is_err());
        assert!(mixup_features(&a, 0, &[1.0], 1, 0.5).is_err());
    }

    #[test]
    fn mixed_label_cross_entropy_is_linear() {
        let clf = Classifier {
            weights: Matrix::from_rows(&[[0.7, -0.2], [0.1, 0.4], [-0.3, 0.0]]).unwrap(),
            bias: vec![0.05, -0.1, 0.2],
        };
        let mixed = mixup_features(&[1.0, 2.0], 0, &[-1.0, 0.5], 2, 0.3).unwrap();
        let soft = mixed_cross_entropy(&[mixed.clone()], &clf).unwrap();

        // cross-entropy of the same mixed feature under each hard label
        let hard = |c: usize| {
            let logits = clf.logits(&mixed.feature);
            let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
            lse - logits[c]
        };
        assert!((soft - (0.3 * hard(0) + 0.7 * hard(2))).abs() < 1e-12);
    }
}
