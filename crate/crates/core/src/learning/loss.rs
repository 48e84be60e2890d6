//! Pairwise Bradley-Terry cross-entropy with equivalence weighting and an
//! output-magnitude penalty.

use crate::error::{Error, Result};
use crate::oracle::{sigmoid, Label};
use crate::tinynet::TrainHyper;

/// Learner-side choice probability; rationality is fixed to 1.
pub fn bt_learn_prob(v1: f64, v2: f64) -> f64 {
    sigmoid(v1 - v2)
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Cross-entropy of one pair: `-y ln P(s1 > s2) - (1 - y) ln P(s2 > s1)`.
pub fn pair_ce(v1: f64, v2: f64, y: f64) -> f64 {
    let d = v1 - v2;
    y * softplus(-d) + (1.0 - y) * softplus(d)
}

/// Summed cross-entropy over `(v1, v2, label)` triples.
pub fn ce_loss<I: IntoIterator<Item = (f64, f64, Label)>>(pairs: I) -> f64 {
    pairs.into_iter().map(|(a, b, l)| pair_ce(a, b, l.target())).sum()
}

/// Sum of squared raw outputs over both states of every pair.
pub fn reg_loss<I: IntoIterator<Item = (f64, f64, Label)>>(pairs: I) -> f64 {
    pairs.into_iter().map(|(a, b, _)| a * a + b * b).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_equiv: f64,
    pub lambda_reg: f64,
}

impl From<&TrainHyper> for LossWeights {
    fn from(h: &TrainHyper) -> Self {
        LossWeights {
            lambda_equiv: h.lambda_equiv.unwrap_or(0.0),
            lambda_reg: h.lambda_reg,
        }
    }
}

impl LossWeights {
    /// One pair's contribution and its derivatives with respect to both values.
    pub fn pair_term(&self, v1: f64, v2: f64, label: Label) -> (f64, f64, f64) {
        let y = label.target();
        let w = if label == Label::Equal { self.lambda_equiv } else { 1.0 };
        let d = v1 - v2;
        let ce = y * softplus(-d) + (1.0 - y) * softplus(d);
        let dce = sigmoid(d) - y;
        let value = w * ce + self.lambda_reg * (v1 * v1 + v2 * v2);
        (
            value,
            w * dce + 2.0 * self.lambda_reg * v1,
            -w * dce + 2.0 * self.lambda_reg * v2,
        )
    }
}

/// `(lambda_equiv * ce(equiv) + ce(pref) + lambda_reg * reg) / |D|`.
pub fn total_loss(pairs: &[(f64, f64, Label)], weights: LossWeights) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (equiv, pref): (Vec<_>, Vec<_>) = pairs.iter().copied().partition(|p| p.2 == Label::Equal);
    let sum = weights.lambda_equiv * ce_loss(equiv) + ce_loss(pref) + weights.lambda_reg * reg_loss(pairs.iter().copied());
    Ok(sum / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn learner_probability() {
        assert_eq!(bt_learn_prob(0.4, 0.4), 0.5);
        assert!((bt_learn_prob(1.5, 0.5) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((bt_learn_prob(2.0, -1.0) + bt_learn_prob(-1.0, 2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ce_examples() {
        assert!((ce_loss([(0.3, 0.3, Label::First)]) - LN2).abs() < 1e-15);
        assert!((ce_loss([(0.9, 0.9, Label::Equal)]) - LN2).abs() < 1e-15);
        assert!(ce_loss([(800.0, 0.0, Label::First)]) < 1e-300);
        assert!(ce_loss([(-800.0, 0.0, Label::First)]).is_finite());
    }

    #[test]
    fn reg_examples() {
        assert_eq!(reg_loss([(0.0, 0.0, Label::First)]), 0.0);
        assert_eq!(reg_loss([(1.0, -2.0, Label::Second)]), 5.0);
        let one = [(1.0, -2.0, Label::Second)];
        let two = [one[0], one[0]];
        assert_eq!(reg_loss(two), 2.0 * reg_loss(one));
    }

    #[test]
    fn total_loss_hand_value() {
        // Pair A: v = (1, 0), y = 1  -> ce = ln(1 + e^-1)
        // Pair B: v = (0.5, 0.5), y = 0.5 -> ce = ln 2, weight 10
        // reg = 1 + 0 + 0.25 + 0.25 = 1.5, lambda_reg = 0.01
        let pairs = [(1.0, 0.0, Label::First), (0.5, 0.5, Label::Equal)];
        let w = LossWeights {
            lambda_equiv: 10.0,
            lambda_reg: 0.01,
        };
        let want = (10.0 * LN2 + (1.0 + (-1.0f64).exp()).ln() + 0.01 * 1.5) / 2.0;
        assert!((total_loss(&pairs, w).unwrap() - want).abs() < 1e-10);

        let plain = LossWeights {
            lambda_equiv: 1.0,
            lambda_reg: 0.0,
        };
        let mean_ce = ce_loss(pairs) / 2.0;
        assert!((total_loss(&pairs, plain).unwrap() - mean_ce).abs() < 1e-15);

        let no_equiv = [(1.0, 0.0, Label::First), (0.2, 0.7, Label::Second)];
        let want = (ce_loss(no_equiv) + 0.01 * reg_loss(no_equiv)) / 2.0;
        assert!((total_loss(&no_equiv, w).unwrap() - want).abs() < 1e-15);
        assert!(matches!(total_loss(&[], w), Err(Error::EmptyDataset)));
    }

    #[test]
    fn pair_term_derivatives() {
        let w = LossWeights {
            lambda_equiv: 10.0,
            lambda_reg: 1e-2,
        };
        let h = 1e-6;
        for label in [Label::First, Label::Equal, Label::Second] {
            let (a, b) = (0.37, -1.2);
            let (_, d1, d2) = w.pair_term(a, b, label);
            let fd1 = (w.pair_term(a + h, b, label).0 - w.pair_term(a - h, b, label).0) / (2.0 * h);
            let fd2 = (w.pair_term(a, b + h, label).0 - w.pair_term(a, b - h, label).0) / (2.0 * h);
            assert!((d1 - fd1).abs() < 1e-7 && (d2 - fd2).abs() < 1e-7);
        }
    }

    proptest::proptest! {
        #[test]
        fn swapping_pairs_and_labels_preserves_loss(
            vals in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0u8..3), 1..20)
        ) {
            let label = |k: u8| [Label::First, Label::Equal, Label::Second][k as usize];
            let pairs: Vec<_> = vals.iter().map(|&(a, b, k)| (a, b, label(k))).collect();
            let swapped: Vec<_> = pairs.iter().map(|&(a, b, l)| (b, a, l.swapped())).collect();
            let w = LossWeights { lambda_equiv: 10.0, lambda_reg: 1e-4 };
            let x = total_loss(&pairs, w).unwrap();
            let y = total_loss(&swapped, w).unwrap();
            proptest::prop_assert!((x - y).abs() <= 1e-10);
        }
    }
}
