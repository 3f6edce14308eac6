//! Metadata-CSV datasets: a `path,label,fold` header, one clip per row.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use acdnet_core::data::{DataError, Dataset};
use serde::Deserialize;
use thiserror::Error;

use crate::resample::resample;
use crate::wav::{load_wav_clip, WavError};

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: no rows")]
    Empty { path: String },
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataRow {
    pub path: PathBuf,
    pub label: String,
    pub fold: usize,
}

pub fn read_metadata(csv_path: &Path) -> Result<Vec<MetadataRow>, MetadataError> {
    let wrap = |source| MetadataError::Csv {
        path: csv_path.display().to_string(),
        source,
    };
    let mut reader = csv::Reader::from_path(csv_path).map_err(wrap)?;
    let rows = reader.deserialize().collect::<Result<Vec<MetadataRow>, _>>().map_err(wrap)?;
    if rows.is_empty() {
        return Err(MetadataError::Empty {
            path: csv_path.display().to_string(),
        });
    }
    Ok(rows)
}

/// Class names in index order: numeric order when every label is an
/// integer, lexicographic otherwise.
pub fn class_names(rows: &[MetadataRow]) -> Vec<String> {
    let set: BTreeSet<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    let mut names: Vec<String> = set.into_iter().map(str::to_string).collect();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().unwrap());
    }
    names
}

/// Loads every listed WAV and resamples it to `sr`. Relative paths resolve
/// against the CSV's directory.
pub fn load_metadata_dataset(csv_path: &Path, sr: usize) -> Result<Dataset, MetadataError> {
    let rows = read_metadata(csv_path)?;
    let names = class_names(&rows);
    let base = csv_path.parent().unwrap_or(Path::new("."));
    let mut clips = Vec::with_capacity(rows.len());
    let mut folds = Vec::with_capacity(rows.len());
    for r in &rows {
        let label = names.iter().position(|n| *n == r.label).expect("collected above");
        let path = if r.path.is_absolute() { r.path.clone() } else { base.join(&r.path) };
        clips.push(resample(&load_wav_clip(&path, label)?, sr));
        folds.push(r.fold);
    }
    Ok(Dataset::new(clips, folds, names)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wav::write_wav;

    #[test]
    fn loads_and_resamples() {
        let dir = tempfile::tempdir().unwrap();
        let tone: Vec<f32> = (0..1600).map(|i| (1000.0 * (i as f32 * 0.05).sin()).round()).collect();
        write_wav(&dir.path().join("a.wav"), &tone, 16_000).unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        write_wav(&dir.path().join("sub/b.wav"), &tone[..800], 8_000).unwrap();
        let csv = dir.path().join("meta.csv");
        std::fs::write(&csv, "path,label,fold\na.wav,10,1\nsub/b.wav,2,2\n").unwrap();
        let ds = load_metadata_dataset(&csv, 8_000).unwrap();
        assert_eq!(ds.class_names, vec!["2", "10"]);
        assert_eq!(ds.folds, vec![1, 2]);
        assert_eq!(ds.clips[0].label, 1);
        assert_eq!(ds.clips[0].samples.len(), 800);
        assert_eq!(ds.clips[1].samples, tone[..800].to_vec());
        assert!(ds.clips.iter().all(|c| c.sr == 8_000));
    }

    #[test]
    fn bad_csv_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("meta.csv");
        std::fs::write(&csv, "file,label,fold\na.wav,x,1\n").unwrap();
        assert!(matches!(load_metadata_dataset(&csv, 8000), Err(MetadataError::Csv { .. })));
        std::fs::write(&csv, "path,label,fold\n").unwrap();
        assert!(matches!(load_metadata_dataset(&csv, 8000), Err(MetadataError::Empty { .. })));
        std::fs::write(&csv, "path,label,fold\nmissing.wav,x,1\n").unwrap();
        assert!(matches!(load_metadata_dataset(&csv, 8000), Err(MetadataError::Wav(WavError::Io { .. }))));
    }
}
