//! Planted-signal multi-modal data.
//!
//! Each modality gets `K` orthonormal concept embeddings. A sample draws a
//! query of a few distinct concepts (its text tokens are those concepts'
//! text embeddings plus noise) and assigns every clip a uniformly random
//! concept. A clip is salient iff its concept is in the query. Video features
//! are the clip concept's video embedding plus noise; audio features carry
//! the concept's audio embedding only for an `audio_informative_fraction` of
//! the salient clips and are pure noise elsewhere, unless
//! `audio_all_clips` makes every clip's audio informative.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::PaddingMask;
use crate::data::manifest::{write_manifest, write_sample, Split};
use crate::data::MultiModalSample;
use crate::error::{Error, Result};
use crate::model::{FeatureSequence, Modality};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_concepts: usize,
    pub d_video: usize,
    pub d_audio: usize,
    pub d_text: usize,
    /// Inclusive clip-count range per sample.
    pub clips: (usize, usize),
    /// Inclusive text-token range per sample.
    pub tokens: (usize, usize),
    /// Inclusive range of distinct query concepts (capped by the token count
    /// and by `n_concepts - 1`).
    pub query_concepts: (usize, usize),
    pub noise_sigma: f64,
    pub audio_informative_fraction: f64,
    pub audio_all_clips: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_val: 100,
            n_concepts: 6,
            d_video: 16,
            d_audio: 16,
            d_text: 16,
            clips: (8, 16),
            tokens: (1, 3),
            query_concepts: (1, 3),
            noise_sigma: 0.3,
            audio_informative_fraction: 1.0,
            audio_all_clips: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_concepts < 2 {
            return fail("n_concepts must be at least 2".into());
        }
        for (name, d) in [("d_video", self.d_video), ("d_audio", self.d_audio), ("d_text", self.d_text)] {
            if d < self.n_concepts {
                return fail(format!(
                    "{name} = {d} cannot hold {} orthonormal concepts",
                    self.n_concepts
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.audio_informative_fraction) {
            return fail("audio_informative_fraction must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and non-negative".into());
        }
        for (name, (lo, hi)) in [("clips", self.clips), ("tokens", self.tokens), ("query_concepts", self.query_concepts)] {
            if lo == 0 || lo > hi {
                return fail(format!("{name} range ({lo}, {hi}) is invalid"));
            }
        }
        if self.n_train + self.n_val == 0 {
            return fail("nothing to generate".into());
        }
        Ok(())
    }
}

/// Orthonormal concept embeddings, one `K x d` table per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptTables {
    pub video: Tensor,
    pub audio: Tensor,
    pub text: Tensor,
}

impl ConceptTables {
    pub fn table(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }

    /// Index of the concept with the largest inner product with `x`.
    pub fn nearest(&self, m: Modality, x: &[f64]) -> usize {
        let table = self.table(m);
        (0..table.rows())
            .map(|k| (k, table.row(k).iter().zip(x).map(|(a, b)| a * b).sum::<f64>()))
            .fold((0, f64::NEG_INFINITY), |best, (k, s)| if s > best.1 { (k, s) } else { best })
            .0
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub concepts: ConceptTables,
    pub train: Vec<MultiModalSample>,
    pub val: Vec<MultiModalSample>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gram-Schmidt on Gaussian rows; `k <= d`.
fn orthonormal_rows(rng: &mut impl Rng, k: usize, d: usize) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= p * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_rows(&rows).expect("rectangular")
}

fn noisy(rng: &mut impl Rng, base: Option<&[f64]>, d: usize, sigma: f64) -> Vec<f64> {
    (0..d)
        .map(|j| base.map_or(0.0, |b| b[j]) + sigma * gaussian(rng))
        .collect()
}

fn generate_sample(cfg: &SynthConfig, concepts: &ConceptTables, id: String, rng: &mut ChaCha8Rng) -> Result<MultiModalSample> {
    let k = cfg.n_concepts;
    let n_c = rng.random_range(cfg.clips.0..=cfg.clips.1);
    let n_t = rng.random_range(cfg.tokens.0..=cfg.tokens.1);
    let q_hi = cfg.query_concepts.1.min(n_t).min(k - 1);
    let q_lo = cfg.query_concepts.0.min(q_hi);
    let q = rng.random_range(q_lo..=q_hi);
    let query: Vec<usize> = index::sample(rng, k, q).into_vec();

    let mut token_concepts: Vec<usize> = (0..n_t).map(|j| query[j % q]).collect();
    token_concepts.shuffle(rng);
    let clip_concepts: Vec<usize> = (0..n_c).map(|_| rng.random_range(0..k)).collect();
    let labels: Vec<f64> = clip_concepts
        .iter()
        .map(|c| if query.contains(c) { 1.0 } else { 0.0 })
        .collect();

    let sigma = cfg.noise_sigma;
    let mut video = Vec::with_capacity(n_c * cfg.d_video);
    let mut audio = Vec::with_capacity(n_c * cfg.d_audio);
    for (i, &c) in clip_concepts.iter().enumerate() {
        video.extend(noisy(rng, Some(concepts.video.row(c)), cfg.d_video, sigma));
        let informative = cfg.audio_all_clips || (labels[i] > 0.0 && rng.random::<f64>() < cfg.audio_informative_fraction);
        let base = informative.then(|| concepts.audio.row(c));
        audio.extend(noisy(rng, base, cfg.d_audio, sigma));
    }
    let mut text = Vec::with_capacity(n_t * cfg.d_text);
    for &c in &token_concepts {
        text.extend(noisy(rng, Some(concepts.text.row(c)), cfg.d_text, sigma));
    }

    let seq = |m, rows, d, data| -> Result<FeatureSequence> {
        FeatureSequence::new(m, Tensor::matrix(rows, d, data)?, PaddingMask::all_valid(rows))
    };
    MultiModalSample::new(
        id,
        seq(Modality::Video, n_c, cfg.d_video, video)?,
        Some(seq(Modality::Audio, n_c, cfg.d_audio, audio)?),
        Some(seq(Modality::Text, n_t, cfg.d_text, text)?),
        labels,
    )
}

/// Generates the train and validation splits. The result is a pure function
/// of `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut crng = stream_rng(cfg.seed, 0);
    let concepts = ConceptTables {
        video: orthonormal_rows(&mut crng, cfg.n_concepts, cfg.d_video),
        audio: orthonormal_rows(&mut crng, cfg.n_concepts, cfg.d_audio),
        text: orthonormal_rows(&mut crng, cfg.n_concepts, cfg.d_text),
    };
    let split = |prefix: &str, n: usize, stream_base: u64| -> Result<Vec<MultiModalSample>> {
        (0..n)
            .map(|i| {
                let mut rng = stream_rng(cfg.seed, stream_base + i as u64);
                generate_sample(cfg, &concepts, format!("{prefix}{i:05}"), &mut rng)
            })
            .collect()
    };
    let train = split("train", cfg.n_train, 1 << 32)?;
    let val = split("val", cfg.n_val, 2 << 32)?;
    Ok(SynthDataset {
        config: cfg.clone(),
        concepts,
        train,
        val,
    })
}

impl SynthDataset {
    /// Writes `train.jsonl`, `val.jsonl` and the feature files under `dir`.
    /// Returns the number of files written.
    pub fn write(&self, dir: &Path) -> Result<usize> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = 0;
        for (name, split, samples) in [("train.jsonl", Split::Train, &self.train), ("val.jsonl", Split::Val, &self.val)] {
            let records = samples
                .iter()
                .map(|s| {
                    files += 1 + usize::from(s.audio.is_some()) + usize::from(s.text.is_some());
                    write_sample(dir, s, split)
                })
                .collect::<Result<Vec<_>>>()?;
            write_manifest(dir.join(name), &records)?;
            files += 1;
        }
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concepts_are_orthonormal() {
        let ds = synth_generate(&SynthConfig {
            n_train: 1,
            n_val: 0,
            ..Default::default()
        })
        .unwrap();
        let t = &ds.concepts.video;
        for a in 0..t.rows() {
            for b in 0..t.rows() {
                let dot: f64 = t.row(a).iter().zip(t.row(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_dims_are_rejected() {
        let cfg = SynthConfig {
            d_audio: 4,
            ..Default::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
        let cfg = SynthConfig {
            n_concepts: 1,
            ..Default::default()
        };
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn generation_is_a_pure_function_of_the_config() {
        let cfg = SynthConfig {
            n_train: 5,
            n_val: 3,
            seed: 9,
            ..Default::default()
        };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        let c = synth_generate(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn audio_is_silent_on_background_clips() {
        let cfg = SynthConfig {
            n_train: 20,
            n_val: 0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        for s in &ds.train {
            let audio = &s.audio.as_ref().unwrap().features;
            for (i, &label) in s.saliency.iter().enumerate() {
                let energy: f64 = audio.row(i).iter().map(|v| v * v).sum();
                if label > 0.0 {
                    assert!((energy - 1.0).abs() < 1e-12);
                } else {
                    assert_eq!(energy, 0.0);
                }
            }
        }
    }
}
