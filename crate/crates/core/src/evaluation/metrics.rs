//! ACC, AUC and EER at image and video level.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Image,
    Video,
}

/// Scores (higher means more likely fake) with binary labels (`true` is fake).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub groups: Option<Vec<String>>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        ScoreSet::with_groups(scores, labels, None)
    }

    pub fn with_groups(scores: Vec<f64>, labels: Vec<bool>, groups: Option<Vec<String>>) -> Result<Self> {
        if scores.len() != labels.len() || groups.as_ref().is_some_and(|g| g.len() != scores.len()) {
            return Err(Error::shape("score set", "scores, labels and groups must have equal length"));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: format!("score {i}") });
        }
        Ok(ScoreSet { scores, labels, groups })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Averages scores within each group id; ungrouped samples stand alone.
    /// Groups appear in order of first occurrence.
    pub fn video_level(&self) -> Result<ScoreSet> {
        let Some(groups) = &self.groups else {
            return Ok(ScoreSet { groups: None, ..self.clone() });
        };
        let mut order: Vec<&str> = Vec::new();
        let mut acc: BTreeMap<&str, (f64, usize, bool)> = BTreeMap::new();
        for ((g, &s), &l) in groups.iter().zip(&self.scores).zip(&self.labels) {
            let slot = acc.entry(g).or_insert_with(|| {
                order.push(g);
                (0.0, 0, l)
            });
            if slot.2 != l {
                return Err(Error::InvalidConfig(format!("group `{g}` mixes real and fake samples")));
            }
            slot.0 += s;
            slot.1 += 1;
        }
        let (scores, labels) = order.iter().map(|g| {
            let (sum, n, l) = acc[g];
            (sum / n as f64, l)
        }).unzip();
        ScoreSet::with_groups(scores, labels, Some(order.iter().map(|g| g.to_string()).collect()))
    }

    fn counts(&self) -> (usize, usize) {
        let fake = self.labels.iter().filter(|&&l| l).count();
        (self.labels.len() - fake, fake)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

fn require_both(set: &ScoreSet) -> Result<(usize, usize)> {
    let (real, fake) = set.counts();
    if real == 0 || fake == 0 {
        let missing = if real == 0 { "real" } else { "fake" };
        return Err(Error::SingleClass(format!("no {missing} samples among {}", set.len())));
    }
    Ok((real, fake))
}

/// Mann–Whitney AUC with tied pairs counted one half.
pub fn auc(set: &ScoreSet) -> Result<f64> {
    let (n_real, n_fake) = require_both(set)?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| set.labels[k]).count() as f64;
        i = j + 1;
    }
    let nf = n_fake as f64;
    Ok((rank_sum - nf * (nf + 1.0) / 2.0) / (nf * n_real as f64))
}

/// ROC vertices `(fpr, tpr)` from the highest threshold down, one per
/// distinct score, starting at `(0, 0)`.
pub fn roc_points(set: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    let (n_real, n_fake) = require_both(set)?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == s {
            if set.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_real as f64, tp as f64 / n_fake as f64));
    }
    Ok(points)
}

/// Rate where FPR equals FNR, interpolated linearly between ROC vertices.
pub fn eer(set: &ScoreSet) -> Result<f64> {
    let points = roc_points(set)?;
    // fpr + tpr - 1 increases strictly along the ROC from -1 to 1.
    let f = |(fpr, tpr): (f64, f64)| fpr + tpr - 1.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (fa, fb) = (f(a), f(b));
        if fb >= 0.0 {
            let t = if fb == fa { 0.0 } else { -fa / (fb - fa) };
            return Ok(a.0 + t * (b.0 - a.0));
        }
    }
    Ok(1.0)
}

/// Share of samples whose `score >= threshold` prediction matches the label.
pub fn accuracy(set: &ScoreSet, threshold: f64) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let correct = set.scores.iter().zip(&set.labels).filter(|(&s, &l)| (s >= threshold) == l).count();
    correct as f64 / set.len() as f64
}

pub fn compute_metrics(set: &ScoreSet, level: Level, threshold: f64) -> Result<Metrics> {
    let set = match level {
        Level::Image => set.clone(),
        Level::Video => set.video_level()?,
    };
    let (n_real, n_fake) = require_both(&set)?;
    Ok(Metrics { acc: accuracy(&set, threshold), auc: auc(&set)?, eer: eer(&set)?, n_real, n_fake })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], labels: &[bool]) -> ScoreSet {
        ScoreSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]);
        assert_eq!(auc(&s).unwrap(), 1.0);
        assert_eq!(eer(&s).unwrap(), 0.0);
        assert_eq!(accuracy(&s, 0.5), 1.0);
    }

    #[test]
    fn inverted_scores() {
        let s = set(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]);
        assert_eq!(auc(&s).unwrap(), 0.0);
        assert_eq!(eer(&s).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_give_half() {
        let s = set(&[0.3; 6], &[true, false, true, false, false, true]);
        assert_eq!(auc(&s).unwrap(), 0.5);
        assert!((eer(&s).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(matches!(auc(&set(&[0.1, 0.2], &[true, true])), Err(Error::SingleClass(_))));
    }

    #[test]
    fn video_level_averages_groups() {
        let groups = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let s = ScoreSet::with_groups(vec![0.2, 0.4, 0.9, 0.7], vec![false, false, true, true], Some(groups)).unwrap();
        let v = s.video_level().unwrap();
        assert_eq!(v.labels, vec![false, true]);
        assert!((v.scores[0] - 0.3).abs() < 1e-15 && (v.scores[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_score_is_rejected() {
        assert!(ScoreSet::new(vec![f64::NAN], vec![true]).is_err());
    }
}
