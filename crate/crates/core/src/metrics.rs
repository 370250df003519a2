//! Threshold-free detection metrics over scores where higher means more OOD.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    /// `(score, is_ood)`.
    entries: Vec<(f64, bool)>,
    n_ood: usize,
}

impl ScoredSet {
    pub fn new(entries: Vec<(f64, bool)>) -> Result<Self> {
        if let Some((s, _)) = entries.iter().find(|(s, _)| !s.is_finite()) {
            return Err(Error::Metric(format!("non-finite score {s}")));
        }
        let n_ood = entries.iter().filter(|(_, o)| *o).count();
        if n_ood == 0 || n_ood == entries.len() {
            return Err(Error::Metric(
                "need at least one ID and one OOD score".into(),
            ));
        }
        Ok(Self { entries, n_ood })
    }

    pub fn from_groups(id_scores: &[f64], ood_scores: &[f64]) -> Result<Self> {
        let entries = id_scores
            .iter()
            .map(|&s| (s, false))
            .chain(ood_scores.iter().map(|&s| (s, true)))
            .collect();
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(f64, bool)] {
        &self.entries
    }

    pub fn n_ood(&self) -> usize {
        self.n_ood
    }

    pub fn n_id(&self) -> usize {
        self.entries.len() - self.n_ood
    }

    /// Same membership with every score negated.
    pub fn negated(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|&(s, o)| (-s, o)).collect(),
            n_ood: self.n_ood,
        }
    }

    fn sorted(&self) -> Vec<(f64, bool)> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

/// `P(score_ood > score_id) + P(tie) / 2`, via midranks.
pub fn auroc(set: &ScoredSet) -> f64 {
    let sorted = set.sorted();
    let mut ood_rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let midrank = (i + 1 + j) as f64 / 2.0;
        let oods = sorted[i..j].iter().filter(|(_, o)| *o).count();
        ood_rank_sum += midrank * oods as f64;
        i = j;
    }
    let (n1, n0) = (set.n_ood() as f64, set.n_id() as f64);
    let u = ood_rank_sum - n1 * (n1 + 1.0) / 2.0;
    u / (n1 * n0)
}

/// Smallest false-positive rate among thresholds `lambda` (flag OOD when
/// `score > lambda`) that catch at least `tpr_target` of the OOD scores.
pub fn fpr_at_tpr(set: &ScoredSet, tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Metric(format!(
            "tpr_target {tpr_target} outside (0, 1]"
        )));
    }
    let needed = required_positives(tpr_target, set.n_ood());
    // Walk thresholds from high to low; both rates only grow.
    let sorted = set.sorted();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = sorted.len();
    while i > 0 {
        let v = sorted[i - 1].0;
        while i > 0 && sorted[i - 1].0 == v {
            if sorted[i - 1].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i -= 1;
        }
        if tp >= needed {
            break;
        }
    }
    Ok(fp as f64 / set.n_id() as f64)
}

pub fn fpr95(set: &ScoredSet) -> Result<f64> {
    fpr_at_tpr(set, 0.95)
}

/// Fewest true positives whose rate reaches `target`.
pub(crate) fn required_positives(target: f64, n: usize) -> usize {
    ((target * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let s = ScoredSet::from_groups(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        assert_eq!(auroc(&s), 1.0);
        assert_eq!(fpr95(&s).unwrap(), 0.0);
    }

    #[test]
    fn three_of_four_pairs() {
        let s = ScoredSet::from_groups(&[0.1, 0.7], &[0.5, 0.9]).unwrap();
        assert_eq!(auroc(&s), 0.75);
    }

    #[test]
    fn all_ties_is_half() {
        let s = ScoredSet::from_groups(&[0.3; 5], &[0.3; 3]).unwrap();
        assert_eq!(auroc(&s), 0.5);
    }

    #[test]
    fn fpr_example() {
        let s = ScoredSet::from_groups(&[1.0, 2.0, 3.0, 4.0], &[2.5, 3.5]).unwrap();
        assert_eq!(fpr95(&s).unwrap(), 0.5);
    }

    #[test]
    fn fpr_on_identical_lists() {
        let xs: Vec<f64> = (0..100).map(f64::from).collect();
        let s = ScoredSet::from_groups(&xs, &xs).unwrap();
        let f = fpr95(&s).unwrap();
        assert!((f - 0.95).abs() <= 0.01, "{f}");
    }

    #[test]
    fn single_class_rejected() {
        assert!(ScoredSet::from_groups(&[0.1], &[]).is_err());
        assert!(ScoredSet::from_groups(&[], &[0.1]).is_err());
        assert!(ScoredSet::from_groups(&[f64::NAN], &[0.1]).is_err());
        let s = ScoredSet::from_groups(&[0.1], &[0.2]).unwrap();
        assert!(fpr_at_tpr(&s, 0.0).is_err());
        assert!(fpr_at_tpr(&s, 1.5).is_err());
    }

    #[test]
    fn required_positive_counts() {
        assert_eq!(required_positives(0.95, 20), 19);
        assert_eq!(required_positives(0.95, 2), 2);
        assert_eq!(required_positives(1.0, 7), 7);
    }
}
