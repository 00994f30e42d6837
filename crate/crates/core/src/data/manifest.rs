//! JSON-lines dataset manifests.
//!
//! Each line is one record:
//!
//! ```json
//! {"sample_id":"s0","video_path":"features/s0.video.cfst","audio_path":"...","labels":[0,1],"split":"train"}
//! ```
//!
//! `audio_path` and `text_path` are optional. Paths are relative to the
//! manifest's directory. Every feature file holds a `features` matrix and an
//! optional `mask` vector of 0/1 values.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::PaddingMask;
use crate::data::format::{read_tensor_file, write_tensor_file, TensorMap};
use crate::data::MultiModalSample;
use crate::error::{Error, Result};
use crate::model::{FeatureSequence, Modality};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub video_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_path: Option<String>,
    pub labels: Vec<f64>,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|source| Error::Json {
            context: format!("{}:{}", path.display(), i + 1),
            source,
        })?;
        if !seen.insert(record.sample_id.clone()) {
            return Err(Error::Data(format!(
                "{}:{}: duplicate sample_id `{}`",
                path.display(),
                i + 1,
                record.sample_id
            )));
        }
        records.push(record);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(DatasetManifest { root, records })
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|source| Error::Json {
            context: format!("record `{}`", r.sample_id),
            source,
        })?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-sample max normalization into `[0, 1]`. All-zero labels stay zero.
pub fn normalize_labels(labels: &[f64]) -> Result<Vec<f64>> {
    if labels.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Data("labels must be finite and non-negative".into()));
    }
    let max = labels.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(labels.to_vec());
    }
    Ok(labels.iter().map(|v| v / max).collect())
}

fn read_sequence(root: &Path, rel: &str, modality: Modality) -> Result<FeatureSequence> {
    let path = root.join(rel);
    if !path.is_file() {
        return Err(Error::Data(format!("cannot resolve {modality} path {}", path.display())));
    }
    let mut map = read_tensor_file(&path)?;
    let features = map
        .remove("features")
        .ok_or_else(|| Error::Data(format!("{}: no `features` entry", path.display())))?;
    if features.shape().len() != 2 {
        return Err(Error::Data(format!(
            "{}: features must be a matrix, got {:?}",
            path.display(),
            features.shape()
        )));
    }
    let mask = match map.remove("mask") {
        None => PaddingMask::all_valid(features.rows()),
        Some(m) => PaddingMask::new(m.data().iter().map(|&v| v != 0.0).collect())?,
    };
    FeatureSequence::new(modality, features, mask)
}

pub fn load_sample(manifest: &DatasetManifest, record: &ManifestRecord) -> Result<MultiModalSample> {
    let root = &manifest.root;
    let video = read_sequence(root, &record.video_path, Modality::Video)?;
    let audio = record
        .audio_path
        .as_deref()
        .map(|p| read_sequence(root, p, Modality::Audio))
        .transpose()?;
    let text = record
        .text_path
        .as_deref()
        .map(|p| read_sequence(root, p, Modality::Text))
        .transpose()?;
    if record.labels.len() != video.len() {
        return Err(Error::Data(format!(
            "{}: {} labels for {} clips",
            record.sample_id,
            record.labels.len(),
            video.len()
        )));
    }
    let saliency = normalize_labels(&record.labels)?;
    MultiModalSample::new(record.sample_id.clone(), video, audio, text, saliency)
}

/// Loads every record of a manifest.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<MultiModalSample>> {
    let manifest = load_manifest(path)?;
    manifest.records.iter().map(|r| load_sample(&manifest, r)).collect()
}

fn sequence_map(seq: &FeatureSequence) -> Result<TensorMap> {
    let mut map = TensorMap::new();
    map.insert("features".into(), seq.features.clone());
    if seq.mask.count_valid() != seq.len() {
        let mask = seq.mask.valid().iter().map(|&v| f64::from(u8::from(v))).collect();
        map.insert("mask".into(), Tensor::vector(mask)?);
    }
    Ok(map)
}

/// Writes a sample's feature files under `root/features/` and returns the
/// matching manifest record.
pub fn write_sample(root: &Path, sample: &MultiModalSample, split: Split) -> Result<ManifestRecord> {
    let dir = root.join("features");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut write = |seq: &FeatureSequence| -> Result<String> {
        let rel = format!("features/{}.{}.cfst", sample.sample_id, seq.modality);
        write_tensor_file(root.join(&rel), &sequence_map(seq)?)?;
        Ok(rel)
    };
    Ok(ManifestRecord {
        sample_id: sample.sample_id.clone(),
        video_path: write(&sample.video)?,
        audio_path: sample.audio.as_ref().map(&mut write).transpose()?,
        text_path: sample.text.as_ref().map(&mut write).transpose()?,
        labels: sample.saliency.clone(),
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(m: Modality, rows: usize, d: usize, offset: f64) -> FeatureSequence {
        let data = (0..rows * d).map(|i| i as f64 * 0.5 + offset).collect();
        FeatureSequence::dense(m, Tensor::matrix(rows, d, data).unwrap()).unwrap()
    }

    #[test]
    fn label_normalization() {
        assert_eq!(normalize_labels(&[2.0, 4.0]).unwrap(), vec![0.5, 1.0]);
        assert_eq!(normalize_labels(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(normalize_labels(&[-1.0, 2.0]).is_err());
    }

    #[test]
    fn record_without_text_yields_absent_text() {
        let dir = tempfile::tempdir().unwrap();
        let sample = MultiModalSample::new(
            "yt0",
            seq(Modality::Video, 3, 4, 0.0),
            Some(seq(Modality::Audio, 3, 2, 1.0)),
            None,
            vec![2.0, 0.0, 4.0],
        )
        .unwrap();
        let rec = write_sample(dir.path(), &sample, Split::Val).unwrap();
        assert!(rec.text_path.is_none());
        write_manifest(dir.path().join("m.jsonl"), &[rec]).unwrap();
        let loaded = load_dataset(dir.path().join("m.jsonl")).unwrap();
        assert_eq!(loaded.len(), 1);
        let s = &loaded[0];
        assert!(s.text.is_none());
        assert!(s.video.features.bit_eq(&sample.video.features));
        assert!(s.audio.as_ref().unwrap().features.bit_eq(&sample.audio.as_ref().unwrap().features));
        assert_eq!(s.saliency, vec![0.5, 0.0, 1.0]);
    }

    #[test]
    fn masks_survive_the_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut video = seq(Modality::Video, 3, 2, 0.0);
        video.mask = PaddingMask::new(vec![true, true, false]).unwrap();
        let sample = MultiModalSample::new("p", video, None, Some(seq(Modality::Text, 2, 2, 0.0)), vec![1.0, 0.0, 0.0]).unwrap();
        let rec = write_sample(dir.path(), &sample, Split::Train).unwrap();
        let manifest = DatasetManifest {
            root: dir.path().to_path_buf(),
            records: vec![rec.clone()],
        };
        let loaded = load_sample(&manifest, &rec).unwrap();
        assert_eq!(loaded.video.mask, sample.video.mask);
    }

    #[test]
    fn errors_for_bad_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let sample = MultiModalSample::new("a", seq(Modality::Video, 2, 2, 0.0), None, None, vec![1.0, 0.0]).unwrap();
        let mut rec = write_sample(dir.path(), &sample, Split::Train).unwrap();

        let path = dir.path().join("dup.jsonl");
        write_manifest(&path, &[rec.clone(), rec.clone()]).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Data(msg)) if msg.contains("duplicate")));

        rec.labels = vec![1.0, 0.0, 0.0];
        let path = dir.path().join("len.jsonl");
        write_manifest(&path, &[rec.clone()]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Data(msg)) if msg.contains("labels")));

        rec.labels = vec![1.0, 0.0];
        rec.video_path = "features/missing.cfst".into();
        let path = dir.path().join("missing.jsonl");
        write_manifest(&path, &[rec]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Data(msg)) if msg.contains("cannot resolve")));

        let path = dir.path().join("unknown.jsonl");
        fs::write(&path, "{\"sample_id\":\"x\",\"video_path\":\"v\",\"labels\":[],\"split\":\"train\",\"extra\":1}\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Json { .. })));
    }

    #[test]
    fn misaligned_audio_is_rejected() {
        let err = MultiModalSample::new(
            "m",
            seq(Modality::Video, 3, 2, 0.0),
            Some(seq(Modality::Audio, 2, 2, 0.0)),
            None,
            vec![0.0; 3],
        );
        assert!(err.is_err());
    }
}
