//! Energy-score based selection of negative classes from earlier tasks.

use crate::trainer::energy_score;
use crate::trainer::TrainError;

/// Classes of an earlier task that do not overlap the current task.
#[derive(Debug, Clone, PartialEq)]
pub struct PreviousTask {
    pub task_index: usize,
    pub classes: Vec<String>,
}

/// Logits of one training sample, all from the prompt-fused visual path.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLogits {
    /// Over the current task's classes.
    pub current: Vec<f64>,
    pub label: usize,
    /// One vector per entry of the previous-task list, over its classes.
    pub previous: Vec<Vec<f64>>,
}

impl SampleLogits {
    pub fn misclassified(&self) -> bool {
        argmax(&self.current) != Some(self.label)
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| *v > b) {
            best = Some((i, *v));
        }
    }
    best.map(|(i, _)| i)
}

/// Per-sample negative class names, indexed by batch position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativeSet {
    pub per_sample: Vec<Vec<String>>,
}

impl NegativeSet {
    pub fn empty(batch: usize) -> Self {
        Self {
            per_sample: vec![Vec::new(); batch],
        }
    }

    pub fn total(&self) -> usize {
        self.per_sample.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

/// Nearest-rank percentile: the `⌈γ·n⌉`-th smallest value.
pub fn nearest_rank_percentile(values: &[f64], gamma: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((gamma * sorted.len() as f64) - 1e-12).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Stage 1 never adds negatives. In stage 2, every misclassified sample
/// gets an energy difference `sign·(E(x;t) − E(x;j))` per earlier task `j`;
/// samples strictly above the batch's γ-th percentile of that difference
/// receive all of task `j`'s classes as negatives.
pub fn select_negative_classes(
    batch: &[SampleLogits],
    previous: &[PreviousTask],
    gamma: f64,
    tau: f64,
    diff_sign: f64,
    stage: u8,
) -> Result<NegativeSet, TrainError> {
    let mut out = NegativeSet::empty(batch.len());
    if stage == 1 || previous.is_empty() {
        return Ok(out);
    }
    let eligible: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].misclassified()).collect();
    if eligible.is_empty() {
        return Ok(out);
    }
    let current_energy: Vec<f64> = eligible
        .iter()
        .map(|&i| energy_score(&batch[i].current, tau))
        .collect::<Result<_, _>>()?;
    for (j, task) in previous.iter().enumerate() {
        if task.classes.is_empty() {
            continue;
        }
        let diffs: Vec<f64> = eligible
            .iter()
            .zip(&current_energy)
            .map(|(&i, e_cur)| Ok(diff_sign * (e_cur - energy_score(&batch[i].previous[j], tau)?)))
            .collect::<Result<_, TrainError>>()?;
        let threshold = nearest_rank_percentile(&diffs, gamma).expect("non-empty");
        for (&i, d) in eligible.iter().zip(&diffs) {
            if *d > threshold {
                out.per_sample[i].extend(task.classes.iter().cloned());
            }
        }
    }
    for negs in &mut out.per_sample {
        let mut seen = std::collections::HashSet::new();
        negs.retain(|n| seen.insert(n.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prev() -> Vec<PreviousTask> {
        vec![PreviousTask {
            task_index: 1,
            classes: vec!["old_a".into(), "old_b".into()],
        }]
    }

    /// Sample whose energy difference under sign +1 is `d`: current logits
    /// are a single misclassified pair, previous logit is chosen so that
    /// `E(cur) − E(prev) = d` with single-class previous energy.
    fn sample_with_diff(d: f64, tau: f64) -> SampleLogits {
        let current = vec![0.9, 0.1];
        let e_cur = energy_score(&current, tau).unwrap();
        SampleLogits {
            current,
            label: 1,
            previous: vec![vec![e_cur - d]],
        }
    }

    #[test]
    fn stage_one_is_empty() {
        let batch = vec![sample_with_diff(1.0, 0.01); 3];
        assert!(select_negative_classes(&batch, &prev(), 0.5, 0.01, 1.0, 1).unwrap().is_empty());
    }

    #[test]
    fn all_correct_is_empty() {
        let batch = vec![SampleLogits {
            current: vec![0.9, 0.1],
            label: 0,
            previous: vec![vec![0.0]],
        }];
        assert!(select_negative_classes(&batch, &prev(), 0.5, 0.01, 1.0, 2).unwrap().is_empty());
    }

    #[test]
    fn percentile_example() {
        // brute-force nearest-rank: sorted [1,2,3,4], rank ceil(0.5*4)=2 -> 2.0
        let oracle = {
            let v = [1.0, 2.0, 3.0, 4.0];
            let rank = (0.5f64 * 4.0).ceil() as usize;
            v[rank - 1]
        };
        assert_eq!(nearest_rank_percentile(&[4.0, 1.0, 3.0, 2.0], 0.5), Some(oracle));
        let tau = 0.01;
        let batch: Vec<_> = [1.0, 2.0, 3.0, 4.0].iter().map(|d| sample_with_diff(*d, tau)).collect();
        let negs = select_negative_classes(&batch, &prev(), 0.5, tau, 1.0, 2).unwrap();
        let got: Vec<bool> = negs.per_sample.iter().map(|n| !n.is_empty()).collect();
        assert_eq!(got, vec![false, false, true, true]);
        assert_eq!(negs.per_sample[3], vec!["old_a".to_string(), "old_b".to_string()]);
    }

    #[test]
    fn flipped_sign_selects_other_end() {
        let tau = 0.01;
        let batch: Vec<_> = [1.0, 2.0, 3.0, 4.0].iter().map(|d| sample_with_diff(*d, tau)).collect();
        let negs = select_negative_classes(&batch, &prev(), 0.5, tau, -1.0, 2).unwrap();
        let got: Vec<bool> = negs.per_sample.iter().map(|n| !n.is_empty()).collect();
        // differences become [-1,-2,-3,-4]; threshold -3 -> only -1 and -2 above
        assert_eq!(got, vec![true, true, false, false]);
    }

    #[test]
    fn no_previous_tasks_is_empty() {
        let batch = vec![sample_with_diff(1.0, 0.01)];
        assert!(select_negative_classes(&batch, &[], 0.7, 0.01, 1.0, 2).unwrap().is_empty());
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}
