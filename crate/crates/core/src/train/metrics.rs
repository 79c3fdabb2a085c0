use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub acc: f64,
    pub bca: f64,
    pub weighted_f1: f64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self, TrainError> {
        let k = confusion.len();
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(TrainError::Invalid("confusion matrix must be square and non-empty".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(TrainError::Invalid("confusion matrix is empty".into()));
        }
        let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let predicted: Vec<u64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();

        let mut recall_sum = 0.0;
        let mut present = 0usize;
        let mut wf1 = 0.0;
        for c in 0..k {
            if support[c] == 0 {
                continue;
            }
            present += 1;
            let tp = confusion[c][c] as f64;
            let recall = tp / support[c] as f64;
            recall_sum += recall;
            let precision = if predicted[c] > 0 { tp / predicted[c] as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            wf1 += support[c] as f64 / total as f64 * f1;
        }
        Ok(Self { acc: trace as f64 / total as f64, bca: recall_sum / present as f64, weighted_f1: wf1, confusion })
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<Self, TrainError> {
        if labels.len() != predictions.len() {
            return Err(TrainError::Invalid(format!("{} labels, {} predictions", labels.len(), predictions.len())));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= num_classes || p >= num_classes {
                return Err(TrainError::ClassCount { model: num_classes, data: y.max(p) + 1 });
            }
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

/// Trial-level majority vote over window predictions; ties go to the
/// lowest class index.
pub fn trial_vote(trial_ids: &[&str], labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<MetricsReport, TrainError> {
    use std::collections::BTreeMap;
    let mut votes: BTreeMap<&str, (usize, Vec<u64>)> = BTreeMap::new();
    for ((&id, &y), &p) in trial_ids.iter().zip(labels).zip(predictions) {
        let e = votes.entry(id).or_insert_with(|| (y, vec![0; num_classes]));
        if p < num_classes {
            e.1[p] += 1;
        }
    }
    let mut ys = Vec::with_capacity(votes.len());
    let mut ps = Vec::with_capacity(votes.len());
    for (y, counts) in votes.values() {
        let best = counts.iter().enumerate().fold(0, |b, (i, &c)| if c > counts[b] { i } else { b });
        ys.push(*y);
        ps.push(best);
    }
    MetricsReport::from_predictions(&ys, &ps, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_predictors() {
        let y = [0, 1, 2, 3, 0, 1, 2, 3];
        let m = MetricsReport::from_predictions(&y, &y, 4).unwrap();
        assert_eq!((m.acc, m.bca, m.weighted_f1), (1.0, 1.0, 1.0));
        let m = MetricsReport::from_predictions(&y, &[0; 8], 4).unwrap();
        assert_eq!(m.bca, 0.25);
        assert_eq!(m.acc, 0.25);
    }

    #[test]
    fn two_class_example() {
        let m = MetricsReport::from_confusion(vec![vec![5, 1], vec![2, 2]]).unwrap();
        assert!((m.acc - 0.7).abs() < 1e-12);
        assert!((m.bca - (5.0 / 6.0 + 0.5) / 2.0).abs() < 1e-12);
        let want = (6.0 * 10.0 / 13.0 + 4.0 * 4.0 / 7.0) / 10.0;
        assert!((m.weighted_f1 - want).abs() < 1e-12);
        assert!((m.weighted_f1 - 0.6901).abs() < 1e-4);
    }

    #[test]
    fn binary_bca_is_mean_of_sensitivity_and_specificity() {
        let m = MetricsReport::from_confusion(vec![vec![7, 3], vec![1, 9]]).unwrap();
        let (sens, spec) = (9.0 / 10.0, 7.0 / 10.0);
        assert!((m.bca - (sens + spec) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded_from_bca() {
        let m = MetricsReport::from_confusion(vec![vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 4]]).unwrap();
        assert!((m.bca - (0.75 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs() {
        assert!(MetricsReport::from_confusion(vec![]).is_err());
        assert!(MetricsReport::from_confusion(vec![vec![0, 0], vec![0, 0]]).is_err());
        assert!(MetricsReport::from_predictions(&[0, 5], &[0, 0], 2).is_err());
    }

    #[test]
    fn majority_vote() {
        let ids = ["a", "a", "a", "b", "b"];
        let m = trial_vote(&ids, &[1, 1, 1, 0, 0], &[1, 0, 1, 1, 0], 2).unwrap();
        // a -> 1 (correct); b tie -> 0 (correct)
        assert_eq!(m.acc, 1.0);
    }
}
