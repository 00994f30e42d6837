//! Samples, on-disk formats and synthetic data.

pub mod format;
pub mod manifest;
pub mod synth;

pub use format::{read_tensor_file, write_tensor_file, FormatError, TensorMap};
pub use manifest::{load_dataset, load_manifest, load_sample, normalize_labels, DatasetManifest, ManifestRecord, Split};
pub use synth::{synth_generate, ConceptTables, SynthConfig, SynthDataset};

use crate::error::{Error, Result};
use crate::model::{FeatureSequence, Modality};

/// One video's aligned features and ground-truth clip saliency.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub sample_id: String,
    pub video: FeatureSequence,
    pub audio: Option<FeatureSequence>,
    pub text: Option<FeatureSequence>,
    /// One label per clip, in `[0, 1]` after normalization.
    pub saliency: Vec<f64>,
}

impl MultiModalSample {
    /// Checks modality tags, clip alignment of video and audio (same length
    /// and padding), and the label count.
    pub fn new(
        sample_id: impl Into<String>,
        video: FeatureSequence,
        audio: Option<FeatureSequence>,
        text: Option<FeatureSequence>,
        saliency: Vec<f64>,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        let tag_ok = video.modality == Modality::Video
            && audio.as_ref().is_none_or(|a| a.modality == Modality::Audio)
            && text.as_ref().is_none_or(|t| t.modality == Modality::Text);
        if !tag_ok {
            return Err(Error::Data(format!("{sample_id}: modality tags out of place")));
        }
        let n_c = video.len();
        if let Some(a) = &audio {
            if a.len() != n_c || a.mask != video.mask {
                return Err(Error::Data(format!(
                    "{sample_id}: audio has {} clips, video has {n_c}; clip masks must be equal",
                    a.len()
                )));
            }
        }
        if saliency.len() != n_c {
            return Err(Error::Data(format!(
                "{sample_id}: {} labels for {n_c} clips",
                saliency.len()
            )));
        }
        Ok(Self {
            sample_id,
            video,
            audio,
            text,
            saliency,
        })
    }

    pub fn n_clips(&self) -> usize {
        self.video.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.text.as_ref().map_or(0, FeatureSequence::len)
    }

    /// Per-clip validity.
    pub fn clip_mask(&self) -> &[bool] {
        self.video.mask.valid()
    }
}
