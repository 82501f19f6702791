//! Splits, confusion matrices, and macro-averaged metrics.
//!
//! Two protocols: a per-session temporal split (train on the head of each
//! session, validate and test on its tail) and leave-one-gain-out zero-shot
//! folds that hold every sample of one gain level out of training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::SampleSet;
use crate::record::{GainLevel, TrafficLabel};

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels and predictions differ in length: {labels} vs {predictions}")]
    LengthMismatch { labels: usize, predictions: usize },
    #[error("class {0} out of range")]
    ClassOutOfRange(usize),
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("session {label}/{gain_db} dB with {frames} frames leaves a split empty")]
    SessionTooShort {
        label: &'static str,
        gain_db: u16,
        frames: usize,
    },
    #[error("dataset has no samples at gain {0} dB")]
    MissingGain(u16),
    #[error("expected 11 folds, got {0}")]
    WrongFoldCount(usize),
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }
}

/// Count (true, predicted) pairs.
pub fn confusion(labels: &[usize], predictions: &[usize]) -> Result<ConfusionMatrix, EvalError> {
    if labels.len() != predictions.len() {
        return Err(EvalError::LengthMismatch {
            labels: labels.len(),
            predictions: predictions.len(),
        });
    }
    let mut counts = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&l, &p) in labels.iter().zip(predictions) {
        if l >= NUM_CLASSES {
            return Err(EvalError::ClassOutOfRange(l));
        }
        if p >= NUM_CLASSES {
            return Err(EvalError::ClassOutOfRange(p));
        }
        counts[l][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub overall: OverallMetrics,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Unweighted means of the per-class precision, recall and F1.
pub fn macro_average(per_class: &[ClassMetrics; NUM_CLASSES]) -> (f64, f64, f64) {
    let n = NUM_CLASSES as f64;
    (
        per_class.iter().map(|c| c.precision).sum::<f64>() / n,
        per_class.iter().map(|c| c.recall).sum::<f64>() / n,
        per_class.iter().map(|c| c.f1).sum::<f64>() / n,
    )
}

/// Per-class precision/recall/F1 plus accuracy and macro means. Classes with
/// no predictions or no true samples score 0 by convention.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let per_class = std::array::from_fn(|c| {
        let tp = cm.counts[c][c];
        let predicted: u64 = (0..NUM_CLASSES).map(|i| cm.counts[i][c]).sum();
        let actual: u64 = cm.counts[c].iter().sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
        }
    });
    let (macro_precision, macro_recall, macro_f1) = macro_average(&per_class);
    Ok(MetricsReport {
        per_class,
        overall: OverallMetrics {
            accuracy: ratio(cm.trace(), total),
            macro_precision,
            macro_recall,
            macro_f1,
        },
    })
}

/// Sample indices of the three splits, each ordered by (session, frame).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split every session along time: the first `floor(train_frac * n)` frames
/// train, the next `floor(0.5 * (1 - train_frac) * n)` validate, the rest
/// test. No frame crosses a boundary out of order, so later splits never
/// leak into earlier ones.
pub fn temporal_split(set: &SampleSet, train_frac: f64) -> Result<Split, EvalError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(EvalError::InvalidFraction(train_frac));
    }
    let mut sessions: BTreeMap<(u8, u8), Vec<usize>> = BTreeMap::new();
    for i in 0..set.len() {
        sessions.entry(set.session_key(i)).or_default().push(i);
    }
    // floor after a one-ulp-scale nudge: 0.5 * (1 - 0.8) * 10 evaluates to
    // 0.999999... in binary and must still floor to the intended 1
    let floor_frac = |x: f64| (x + 1e-9).floor() as usize;
    let mut split = Split::default();
    for ((label, gain_index), mut idx) in sessions {
        idx.sort_by_key(|&i| set.ordinals[i]);
        let n = idx.len();
        let n_train = floor_frac(train_frac * n as f64);
        let n_val = floor_frac(0.5 * (1.0 - train_frac) * n as f64);
        if n_train == 0 || n_val == 0 || n_train + n_val >= n {
            return Err(EvalError::SessionTooShort {
                label: TrafficLabel::from_code(label).map_or("?", |l| l.as_str()),
                gain_db: GainLevel::from_index(gain_index as usize).map_or(0, |g| g.db()),
                frames: n,
            });
        }
        split.train.extend(&idx[..n_train]);
        split.val.extend(&idx[n_train..n_train + n_val]);
        split.test.extend(&idx[n_train + n_val..]);
    }
    Ok(split)
}

/// One leave-one-gain-out fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub gain_db: u16,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Eleven folds, one per gain level: fold g trains on every sample whose
/// gain differs from g and tests on the rest. Every gain must be present.
pub fn zero_shot_folds(set: &SampleSet) -> Result<Vec<Fold>, EvalError> {
    let mut by_gain: Vec<Vec<usize>> = vec![Vec::new(); GainLevel::COUNT];
    for i in 0..set.len() {
        by_gain[set.gains[i] as usize].push(i);
    }
    for gain in GainLevel::all() {
        if by_gain[gain.index()].is_empty() {
            return Err(EvalError::MissingGain(gain.db()));
        }
    }
    Ok(GainLevel::all()
        .map(|gain| {
            let mut train = Vec::new();
            for (g, idx) in by_gain.iter().enumerate() {
                if g != gain.index() {
                    train.extend(idx);
                }
            }
            Fold {
                gain_db: gain.db(),
                train,
                test: by_gain[gain.index()].clone(),
            }
        })
        .collect())
}

/// Per-gain accuracies plus their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub per_gain: BTreeMap<u16, f64>,
    pub mean: f64,
}

pub fn zero_shot_report(fold_accuracies: &[(u16, f64)]) -> Result<ZeroShotReport, EvalError> {
    let per_gain: BTreeMap<u16, f64> = fold_accuracies.iter().copied().collect();
    if per_gain.len() != GainLevel::COUNT {
        return Err(EvalError::WrongFoldCount(per_gain.len()));
    }
    for gain in GainLevel::all() {
        if !per_gain.contains_key(&gain.db()) {
            return Err(EvalError::MissingGain(gain.db()));
        }
    }
    let mean = per_gain.values().sum::<f64>() / per_gain.len() as f64;
    Ok(ZeroShotReport { per_gain, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{FrameMatrix, FEATURE_DIM, FRAME_ROWS};
    use proptest::prelude::*;

    fn push_sample(set: &mut SampleSet, label: TrafficLabel, gain_db: u16, ordinal: u32) {
        set.push(&FrameMatrix {
            label,
            gain: GainLevel::new(gain_db).unwrap(),
            frame: u64::from(ordinal),
            ordinal,
            values: vec![f64::from(ordinal); FRAME_ROWS * FEATURE_DIM],
        });
    }

    fn session_set(frames_per_session: u32, gains: &[u16]) -> SampleSet {
        let mut set = SampleSet::new();
        for label in TrafficLabel::ALL {
            for &gain in gains {
                for f in 0..frames_per_session {
                    push_sample(&mut set, label, gain, f);
                }
            }
        }
        set
    }

    #[test]
    fn confusion_counts_pairs() {
        let cm = confusion(&[0, 1], &[1, 0]).unwrap();
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!(cm.counts[1][0], 1);
        assert_eq!(cm.total(), 2);

        let perfect = confusion(&[0, 1, 2, 3, 2], &[0, 1, 2, 3, 2]).unwrap();
        for i in 0..NUM_CLASSES {
            for j in 0..NUM_CLASSES {
                if i != j {
                    assert_eq!(perfect.counts[i][j], 0);
                }
            }
        }
        assert_eq!(perfect.trace(), 5);

        assert!(matches!(
            confusion(&[0], &[0, 1]),
            Err(EvalError::LengthMismatch { labels: 1, predictions: 2 })
        ));
        assert!(matches!(
            confusion(&[4], &[0]),
            Err(EvalError::ClassOutOfRange(4))
        ));
    }

    #[test]
    fn metrics_on_a_hand_checked_matrix() {
        let cm = ConfusionMatrix {
            counts: [[5, 1, 0, 0], [2, 3, 0, 0], [0, 0, 4, 0], [0, 0, 1, 4]],
        };
        let report = metrics(&cm).unwrap();
        assert!((report.overall.accuracy - 16.0 / 20.0).abs() < 1e-12);
        // class 0: 5 of 7 predicted, 5 of 6 true
        assert!((report.per_class[0].precision - 5.0 / 7.0).abs() < 1e-12);
        assert!((report.per_class[0].recall - 5.0 / 6.0).abs() < 1e-12);
        let p = 5.0 / 7.0;
        let r = 5.0 / 6.0;
        assert!((report.per_class[0].f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
        // class 2: precision 4/5, recall 1
        assert!((report.per_class[2].precision - 0.8).abs() < 1e-12);
        assert_eq!(report.per_class[2].recall, 1.0);
    }

    #[test]
    fn perfect_diagonal_scores_ones() {
        let cm = ConfusionMatrix {
            counts: [[3, 0, 0, 0], [0, 7, 0, 0], [0, 0, 2, 0], [0, 0, 0, 5]],
        };
        let report = metrics(&cm).unwrap();
        for c in report.per_class {
            assert_eq!(c.precision, 1.0);
            assert_eq!(c.recall, 1.0);
            assert_eq!(c.f1, 1.0);
        }
        assert_eq!(report.overall.accuracy, 1.0);
        assert_eq!(report.overall.macro_f1, 1.0);
    }

    #[test]
    fn absent_class_scores_zero_by_convention() {
        // class 3 never true, never predicted
        let cm = ConfusionMatrix {
            counts: [[4, 0, 0, 0], [0, 4, 0, 0], [0, 0, 4, 0], [0, 0, 0, 0]],
        };
        let report = metrics(&cm).unwrap();
        let c3 = report.per_class[3];
        assert_eq!((c3.precision, c3.recall, c3.f1), (0.0, 0.0, 0.0));
        assert_eq!(report.overall.accuracy, 1.0);
        assert!((report.overall.macro_precision - 0.75).abs() < 1e-12);
        assert!(matches!(
            metrics(&ConfusionMatrix { counts: [[0; 4]; 4] }),
            Err(EvalError::EmptyMatrix)
        ));
    }

    proptest! {
        #[test]
        fn metric_values_stay_in_unit_interval(
            counts in proptest::array::uniform4(proptest::array::uniform4(0u64..40)),
            bump in 0usize..16,
        ) {
            let mut counts = counts;
            counts[bump / 4][bump % 4] += 1; // never empty
            let report = metrics(&ConfusionMatrix { counts }).unwrap();
            let all = [
                report.overall.accuracy,
                report.overall.macro_precision,
                report.overall.macro_recall,
                report.overall.macro_f1,
            ];
            for v in all {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            for c in report.per_class {
                prop_assert!((0.0..=1.0).contains(&c.precision));
                prop_assert!((0.0..=1.0).contains(&c.recall));
                prop_assert!((0.0..=1.0).contains(&c.f1));
                if c.precision == 0.0 && c.recall == 0.0 {
                    prop_assert_eq!(c.f1, 0.0);
                }
            }
        }
    }

    /// The reference per-class rows aggregate to the reference overall row
    /// within half of the last reported digit.
    #[test]
    fn macro_aggregation_recovers_reference_overall_row() {
        let rows = |p: [f64; 4]| p.map(|v| v / 100.0);
        let pr = rows([75.24, 88.65, 98.81, 98.41]);
        let rc = rows([87.44, 89.46, 97.11, 94.04]);
        let f1 = rows([80.88, 89.05, 97.95, 96.18]);
        let per_class: [ClassMetrics; 4] = std::array::from_fn(|c| ClassMetrics {
            precision: pr[c],
            recall: rc[c],
            f1: f1[c],
        });
        let (mp, mr, mf) = macro_average(&per_class);
        let tol = 0.005 / 100.0 + 1e-9;
        assert!((mp - 0.9028).abs() <= tol, "macro precision {mp}");
        assert!((mr - 0.9201).abs() <= tol, "macro recall {mr}");
        assert!((mf - 0.9101).abs() <= tol, "macro f1 {mf}");
    }

    #[test]
    fn ten_frames_split_eight_one_one() {
        let set = session_set(10, &[70]);
        let split = temporal_split(&set, 0.8).unwrap();
        assert_eq!(split.train.len(), 4 * 8);
        assert_eq!(split.val.len(), 4);
        assert_eq!(split.test.len(), 4);
        // the single-session view: ordinals 0-7 / 8 / 9
        let first_session: Vec<u32> = split
            .train
            .iter()
            .filter(|&&i| set.session_key(i) == (0, 3))
            .map(|&i| set.ordinals[i])
            .collect();
        assert_eq!(first_session, (0..8).collect::<Vec<u32>>());
    }

    #[test]
    fn split_preserves_temporal_order_per_session() {
        let set = session_set(23, &[64, 72]);
        let split = temporal_split(&set, 0.8).unwrap();
        let mut keys: Vec<(u8, u8)> = (0..set.len()).map(|i| set.session_key(i)).collect();
        keys.sort_unstable();
        keys.dedup();
        for key in keys {
            let of = |idx: &[usize]| -> Vec<u32> {
                idx.iter()
                    .filter(|&&i| set.session_key(i) == key)
                    .map(|&i| set.ordinals[i])
                    .collect()
            };
            let (train, val, test) = (of(&split.train), of(&split.val), of(&split.test));
            assert!(!train.is_empty() && !val.is_empty() && !test.is_empty());
            let max_train = *train.iter().max().unwrap();
            let min_val = *val.iter().min().unwrap();
            let max_val = *val.iter().max().unwrap();
            let min_test = *test.iter().min().unwrap();
            assert!(max_train < min_val, "{key:?}");
            assert!(max_val < min_test, "{key:?}");
        }
        // disjoint and exhaustive
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..set.len()).collect::<Vec<usize>>());
    }

    #[test]
    fn short_sessions_and_bad_fractions_are_rejected() {
        let set = session_set(1, &[70]);
        assert!(matches!(
            temporal_split(&set, 0.8),
            Err(EvalError::SessionTooShort { frames: 1, .. })
        ));
        let ok = session_set(10, &[70]);
        assert!(matches!(
            temporal_split(&ok, 0.0),
            Err(EvalError::InvalidFraction(_))
        ));
        assert!(matches!(
            temporal_split(&ok, 1.0),
            Err(EvalError::InvalidFraction(_))
        ));
    }

    #[test]
    fn zero_shot_folds_hold_one_gain_out() {
        let gains: Vec<u16> = GainLevel::all().map(|g| g.db()).collect();
        let set = session_set(3, &gains);
        let folds = zero_shot_folds(&set).unwrap();
        assert_eq!(folds.len(), 11);

        let mut covered = vec![false; set.len()];
        for fold in &folds {
            let held = GainLevel::new(fold.gain_db).unwrap().index() as u8;
            assert!(fold.train.iter().all(|&i| set.gains[i] != held));
            assert!(fold.test.iter().all(|&i| set.gains[i] == held));
            assert!(!fold.test.is_empty());
            assert_eq!(fold.train.len() + fold.test.len(), set.len());
            for &i in &fold.test {
                assert!(!covered[i], "sample {i} tested twice");
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&c| c), "test sets do not cover the dataset");
    }

    #[test]
    fn missing_gain_is_named() {
        let gains: Vec<u16> = GainLevel::all().map(|g| g.db()).filter(|&g| g != 76).collect();
        let set = session_set(2, &gains);
        assert!(matches!(
            zero_shot_folds(&set),
            Err(EvalError::MissingGain(76))
        ));
    }

    #[test]
    fn zero_shot_report_means_over_folds() {
        let gains: Vec<u16> = GainLevel::all().map(|g| g.db()).collect();
        let perfect: Vec<(u16, f64)> = gains.iter().map(|&g| (g, 1.0)).collect();
        assert_eq!(zero_shot_report(&perfect).unwrap().mean, 1.0);

        let spread: Vec<(u16, f64)> = gains
            .iter()
            .enumerate()
            .map(|(i, &g)| (g, 0.5 + 0.05 * i as f64))
            .collect();
        let report = zero_shot_report(&spread).unwrap();
        assert!((report.mean - 0.75).abs() < 1e-12);
        let keys: Vec<u16> = report.per_gain.keys().copied().collect();
        assert_eq!(keys, gains);

        assert!(matches!(
            zero_shot_report(&spread[..10]),
            Err(EvalError::WrongFoldCount(10))
        ));
    }

    #[test]
    fn reports_roundtrip_as_json() {
        let cm = confusion(&[0, 1, 2, 3], &[0, 1, 2, 2]).unwrap();
        let report = metrics(&cm).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let zs = zero_shot_report(
            &GainLevel::all()
                .map(|g| (g.db(), 0.9))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let json = serde_json::to_string(&zs).unwrap();
        let back: ZeroShotReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, zs);
    }
}
