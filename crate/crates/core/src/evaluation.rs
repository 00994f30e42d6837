//! Clip-ranking metrics: average precision, mAP and HIT@1.
//!
//! Clips are ranked by descending score with ties broken by ascending clip
//! index, so every metric is a deterministic function of the scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultiModalSample;
use crate::error::{Error, Result};
use crate::model::CfsumModel;

/// Positive iff `s >= threshold`.
pub fn binarize_labels(labels: &[f64], threshold: f64) -> Vec<bool> {
    labels.iter().map(|&s| s >= threshold).collect()
}

/// Indices ordered by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// `(1/P) * sum over positives of precision at that positive's rank`.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::shape(
            "average_precision",
            format!("{} scores, {} labels", scores.len(), positives.len()),
        ));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, idx) in ranking(scores).into_iter().enumerate() {
        if positives[idx] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

/// 1 iff the top-ranked clip is positive.
pub fn hit_at_1(scores: &[f64], positives: &[bool]) -> Result<u8> {
    if scores.is_empty() || scores.len() != positives.len() {
        return Err(Error::shape(
            "hit_at_1",
            format!("{} scores, {} labels", scores.len(), positives.len()),
        ));
    }
    Ok(u8::from(positives[ranking(scores)[0]]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub ap: f64,
    pub hit1: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleMetrics>,
    pub map: f64,
    pub hit_at_1: f64,
    pub threshold: f64,
    /// Samples left out because they have no positive clip.
    pub skipped: Vec<String>,
}

impl MetricsReport {
    /// Aggregates `(sample_id, scores, labels)` triples. Only valid clips
    /// should be passed in.
    pub fn from_scores<'a>(
        items: impl IntoIterator<Item = (&'a str, &'a [f64], &'a [f64])>,
        threshold: f64,
    ) -> Result<Self> {
        let mut per_sample = Vec::new();
        let mut skipped = Vec::new();
        for (id, scores, labels) in items {
            let positives = binarize_labels(labels, threshold);
            match average_precision(scores, &positives) {
                Ok(ap) => per_sample.push(SampleMetrics {
                    sample_id: id.to_owned(),
                    ap,
                    hit1: hit_at_1(scores, &positives)?,
                }),
                Err(Error::UndefinedAp) => skipped.push(id.to_owned()),
                Err(e) => return Err(e),
            }
        }
        Self::aggregate(per_sample, skipped, threshold)
    }

    fn aggregate(mut per_sample: Vec<SampleMetrics>, mut skipped: Vec<String>, threshold: f64) -> Result<Self> {
        per_sample.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        skipped.sort();
        if per_sample.is_empty() {
            return Err(Error::Data("no sample with a positive clip to evaluate".into()));
        }
        let n = per_sample.len() as f64;
        let map = per_sample.iter().map(|s| s.ap).sum::<f64>() / n;
        let hit_at_1 = per_sample.iter().map(|s| f64::from(s.hit1)).sum::<f64>() / n;
        Ok(Self {
            per_sample,
            map,
            hit_at_1,
            threshold,
            skipped,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width text table, one row per sample plus a summary.
    pub fn table(&self) -> String {
        let width = self.per_sample.iter().map(|s| s.sample_id.len()).max().unwrap_or(0).max(9);
        let mut out = format!("{:<width$}  {:>8}  {:>5}\n", "sample_id", "AP", "HIT@1");
        for s in &self.per_sample {
            out.push_str(&format!("{:<width$}  {:>8.4}  {:>5}\n", s.sample_id, s.ap, s.hit1));
        }
        out.push_str(&format!("{:<width$}  {:>8.4}  {:>5.3}\n", "mean", self.map, self.hit_at_1));
        if !self.skipped.is_empty() {
            out.push_str(&format!("skipped (no positives): {}\n", self.skipped.len()));
        }
        out
    }
}

/// Valid-clip scores and labels of one sample.
fn valid_pairs(scores: &[f64], sample: &MultiModalSample) -> (Vec<f64>, Vec<f64>) {
    scores
        .iter()
        .zip(&sample.saliency)
        .zip(sample.clip_mask())
        .filter(|(_, &v)| v)
        .map(|((&s, &l), _)| (s, l))
        .unzip()
}

/// Scores every sample in parallel and aggregates in ascending `sample_id`
/// order.
pub fn evaluate(model: &CfsumModel, dataset: &[MultiModalSample], threshold: f64) -> Result<MetricsReport> {
    evaluate_with(dataset, threshold, |s| Ok(model.predict(s)?.scores))
}

/// [`evaluate`] for an arbitrary scorer.
pub fn evaluate_with(
    dataset: &[MultiModalSample],
    threshold: f64,
    scorer: impl Fn(&MultiModalSample) -> Result<Vec<f64>> + Sync,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let outcomes: Vec<Result<Option<SampleMetrics>>> = dataset
        .par_iter()
        .map(|sample| {
            let scores = scorer(sample)?;
            let (scores, labels) = valid_pairs(&scores, sample);
            let positives = binarize_labels(&labels, threshold);
            match average_precision(&scores, &positives) {
                Ok(ap) => Ok(Some(SampleMetrics {
                    sample_id: sample.sample_id.clone(),
                    ap,
                    hit1: hit_at_1(&scores, &positives)?,
                })),
                Err(Error::UndefinedAp) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut per_sample = Vec::new();
    let mut skipped = Vec::new();
    for (sample, outcome) in dataset.iter().zip(outcomes) {
        match outcome? {
            Some(m) => per_sample.push(m),
            None => skipped.push(sample.sample_id.clone()),
        }
    }
    MetricsReport::aggregate(per_sample, skipped, threshold)
}
