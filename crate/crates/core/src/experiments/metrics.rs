use crate::env::State;
use crate::error::{Error, Result};
use crate::learning::{CalibratedFeature, Featurizer};
use crate::oracle::GroundTruth;

/// Mean squared error between a calibrated feature's normalized output and
/// the ground-truth calibrated value of the same feature.
pub fn metric_mse(cf: &CalibratedFeature, gt: &GroundTruth, fz: &Featurizer, test_states: &[State]) -> Result<f64> {
    if test_states.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let pred = cf.values(fz, test_states)?;
    let mut sum = 0.0;
    for (p, s) in pred.iter().zip(test_states) {
        sum += (p - gt.feature_value(cf.index, s)?).powi(2);
    }
    Ok(sum / test_states.len() as f64)
}

/// Pairs whose ground-truth values differ by more than `epsilon`.
pub fn evaluable_pairs(gt: &[f64], pairs: &[(usize, usize)], epsilon: f64) -> usize {
    pairs.iter().filter(|&&(a, b)| (gt[a] - gt[b]).abs() > epsilon).count()
}

/// Fraction of evaluable pairs whose preference the model orders the same
/// way as the ground truth. `model` and `gt` are indexed by the pair
/// entries. A model tie counts as wrong.
pub fn metric_reward_accuracy(model: &[f64], gt: &[f64], pairs: &[(usize, usize)], epsilon: f64) -> Result<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for &(a, b) in pairs {
        let dg = gt[a] - gt[b];
        if dg.abs() <= epsilon {
            continue;
        }
        total += 1;
        let dm = model[a] - model[b];
        if (dm > 0.0 && dg > 0.0) || (dm < 0.0 && dg < 0.0) {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::NoEvaluablePairs);
    }
    Ok(correct as f64 / total as f64)
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`); the
/// error is zero for fewer than two values.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_state_set, EnvKind, EnvironmentSpec, Normalizer};
    use crate::learning::{train_calibrated_feature, QueryDataset};
    use crate::tinynet::{LogitRange, TrainHyper};

    fn pairs(n: usize) -> Vec<(usize, usize)> {
        (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
    }

    #[test]
    fn accuracy_of_truth_and_inverse() {
        let gt: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let neg: Vec<f64> = gt.iter().map(|v| -v).collect();
        let p = pairs(20);
        assert_eq!(metric_reward_accuracy(&gt, &gt, &p, 0.01).unwrap(), 1.0);
        assert_eq!(metric_reward_accuracy(&neg, &gt, &p, 0.01).unwrap(), 0.0);
        let flat = vec![0.0; 20];
        assert_eq!(metric_reward_accuracy(&flat, &gt, &p, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn equivalent_pairs_are_excluded() {
        let gt = [0.0, 0.005, 1.0];
        let model = [1.0, 0.0, 2.0];
        let p = [(0, 1), (0, 2), (1, 2)];
        assert_eq!(evaluable_pairs(&gt, &p, 0.01), 2);
        assert_eq!(metric_reward_accuracy(&model, &gt, &p, 0.01).unwrap(), 1.0);
        assert!(matches!(metric_reward_accuracy(&model, &gt, &p[..1], 0.01), Err(Error::NoEvaluablePairs)));
    }

    #[test]
    fn mean_and_standard_error() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // Sample variance 5/3, divided by 4.
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn mse_of_exact_and_untrained_features() {
        let env = EnvironmentSpec::with_default_layout(EnvKind::Utensil);
        let set = build_state_set(&env, 300, 0).unwrap();
        let norm = Normalizer::fit(&set.states, &env).unwrap();
        let fz = Featurizer::new(env, norm.clone());
        let gt = GroundTruth::new(env, norm);
        let test: Vec<State> = set.test_states().copied().collect();
        let (cf, _) = train_calibrated_feature(crate::env::FeatureId::HumanDist, &QueryDataset::default(), &fz, &TrainHyper::calibrated_feature(), 1).unwrap();
        assert_eq!(cf.net.logit_range, LogitRange::default());
        let mse = metric_mse(&cf, &gt, &fz, &test).unwrap();
        assert!(mse.is_finite() && mse > 0.0);
        assert!(matches!(metric_mse(&cf, &gt, &fz, &[]), Err(Error::EmptyTestSet)));
    }
}
