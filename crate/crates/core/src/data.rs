//! Labeled audio clips and fold-assigned datasets.

use thiserror::Error;

/// Full-scale magnitude of 16-bit PCM.
pub const PCM_SCALE: f64 = 32_768.0;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("clip {index}: label {label} out of range for {n_cls} classes")]
    Label { index: usize, label: usize, n_cls: usize },
    #[error("clip {index}: sample magnitude {value} exceeds 16-bit range")]
    Range { index: usize, value: f32 },
    #[error("{clips} clips but {folds} fold assignments")]
    FoldCount { clips: usize, folds: usize },
    #[error("fold {0} has no clips")]
    EmptyFold(usize),
    #[error("clip {index}: sample rate {found} differs from {expected}")]
    SampleRate { index: usize, expected: usize, found: usize },
}

/// Raw samples in 16-bit integer range (not yet divided by 32768).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub samples: Vec<f32>,
    pub label: usize,
    pub sr: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub clips: Vec<LabeledClip>,
    /// Fold id (starting at 1) of each clip.
    pub folds: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(clips: Vec<LabeledClip>, folds: Vec<usize>, class_names: Vec<String>) -> Result<Self, DataError> {
        let d = Self {
            clips,
            folds,
            class_names,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.folds.len() != self.clips.len() {
            return Err(DataError::FoldCount {
                clips: self.clips.len(),
                folds: self.folds.len(),
            });
        }
        let sr = self.clips.first().map_or(0, |c| c.sr);
        for (index, c) in self.clips.iter().enumerate() {
            if c.label >= self.n_cls() {
                return Err(DataError::Label {
                    index,
                    label: c.label,
                    n_cls: self.n_cls(),
                });
            }
            if let Some(&value) = c.samples.iter().find(|v| !(v.abs() <= PCM_SCALE as f32)) {
                return Err(DataError::Range { index, value });
            }
            if c.sr != sr {
                return Err(DataError::SampleRate {
                    index,
                    expected: sr,
                    found: c.sr,
                });
            }
        }
        Ok(())
    }

    pub fn n_cls(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Distinct fold ids in ascending order.
    pub fn fold_ids(&self) -> Vec<usize> {
        let mut f = self.folds.clone();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Indices of clips in `fold` and of all other clips.
    pub fn split(&self, fold: usize) -> Result<(Vec<usize>, Vec<usize>), DataError> {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&i| self.folds[i] == fold);
        if test.is_empty() {
            return Err(DataError::EmptyFold(fold));
        }
        Ok((train, test))
    }

    /// Test fold, validation fold (the last remaining fold) and training
    /// indices. With a single fold besides the test fold, every tenth
    /// training clip is held out instead.
    pub fn train_val_test(&self, test_fold: usize) -> Result<Split, DataError> {
        let (rest, test) = self.split(test_fold)?;
        let others: Vec<usize> = self.fold_ids().into_iter().filter(|&f| f != test_fold).collect();
        let (train, val) = if others.len() >= 2 {
            let vf = *others.last().expect("non-empty");
            rest.into_iter().partition(|&i| self.folds[i] != vf)
        } else {
            let (val, train): (Vec<_>, Vec<_>) = rest.iter().enumerate().partition(|(k, _)| k % 10 == 9);
            (train.into_iter().map(|p| *p.1).collect(), val.into_iter().map(|p| *p.1).collect())
        };
        Ok(Split { train, val, test })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(folds: Vec<usize>) -> Dataset {
        let clips = folds
            .iter()
            .enumerate()
            .map(|(i, _)| LabeledClip {
                samples: vec![0.0; 4],
                label: i % 2,
                sr: 100,
            })
            .collect();
        Dataset::new(clips, folds, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn every_clip_is_tested_exactly_once() {
        let d = ds(vec![1, 2, 3, 1, 2, 3, 4, 5, 4, 5]);
        let mut seen = vec![0; d.len()];
        for f in d.fold_ids() {
            let (train, test) = d.split(f).unwrap();
            assert!(train.iter().all(|i| !test.contains(i)));
            assert_eq!(train.len() + test.len(), d.len());
            for i in test {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn validation_is_last_training_fold() {
        let d = ds(vec![1, 2, 3, 1, 2, 3]);
        let s = d.train_val_test(3).unwrap();
        assert_eq!(s.test, vec![2, 5]);
        assert_eq!(s.val, vec![1, 4]);
        assert_eq!(s.train, vec![0, 3]);
    }

    #[test]
    fn rejects_bad_labels_and_ranges() {
        let clip = |label, v| LabeledClip {
            samples: vec![v],
            label,
            sr: 1,
        };
        let names = vec!["a".to_string()];
        assert!(matches!(
            Dataset::new(vec![clip(1, 0.0)], vec![1], names.clone()),
            Err(DataError::Label { .. })
        ));
        assert!(matches!(
            Dataset::new(vec![clip(0, 40_000.0)], vec![1], names),
            Err(DataError::Range { .. })
        ));
    }
}
