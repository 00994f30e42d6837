//! The coarse-fine fusion saliency model.
//!
//! Data flows through four stages:
//!
//! 1. a modal autoencoder per modality: self-attention at the native feature
//!    width with a residual, then an MLP into the shared `d_model` space and
//!    fixed positional encodings;
//! 2. the modal fusion module: one self-attention over the concatenation of
//!    all modality sequences, a residual, a split back into the original
//!    lengths and a per-modality feed-forward network;
//! 3. the feature interaction module: clip-aligned video and audio streams
//!    attend to the text tokens, and the two branch outputs are combined as
//!    `w_tv * tv + w_ta * ta`;
//! 4. a linear saliency head producing one score per clip, trained with a
//!    masked mean squared error.

mod blocks;
mod config;

pub use blocks::{FeedForward, Linear, Norm};
pub use config::{Modality, ModalitySet, ModelConfig};

use blocks::apply_norm;

use crate::attention::{multi_head_attention, sinusoidal_positional_encoding, AttentionParams, PaddingMask};
use crate::data::MultiModalSample;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One modality's `n x d` feature matrix with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub features: Tensor,
    pub mask: PaddingMask,
}

impl FeatureSequence {
    pub fn new(modality: Modality, features: Tensor, mask: PaddingMask) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape(
                "feature_sequence",
                format!("{modality} features must be a matrix, got {:?}", features.shape()),
            ));
        }
        if mask.len() != features.rows() {
            return Err(Error::shape(
                "feature_sequence",
                format!("{modality}: mask of length {} for {} rows", mask.len(), features.rows()),
            ));
        }
        Ok(Self {
            modality,
            features,
            mask,
        })
    }

    /// A sequence with every position valid.
    pub fn dense(modality: Modality, features: Tensor) -> Result<Self> {
        let n = features.rows();
        Self::new(modality, features, PaddingMask::all_valid(n))
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Per-clip scores with the clip validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyPrediction {
    pub scores: Vec<f64>,
    pub valid: Vec<bool>,
}

/// A modality sequence living on a tape.
#[derive(Debug, Clone)]
pub struct Stream {
    pub modality: Modality,
    pub x: Var,
    pub mask: PaddingMask,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: AttentionParams,
    norm: Option<Norm>,
}

#[derive(Debug, Clone)]
struct Encoder {
    layers: Vec<EncoderLayer>,
    proj: FeedForward,
}

#[derive(Debug, Clone)]
struct FusionLayer {
    attn: AttentionParams,
    norm: Option<Norm>,
    /// Indexed by modality slot.
    ffn: [Option<(FeedForward, Option<Norm>)>; 3],
}

#[derive(Debug, Clone)]
struct BranchLayer {
    attn: AttentionParams,
    post: Option<BranchPost>,
}

#[derive(Debug, Clone)]
struct BranchPost {
    norm1: Option<Norm>,
    ffn: FeedForward,
    norm2: Option<Norm>,
}

#[derive(Debug, Clone)]
enum MixWeight {
    Learned(ParamId),
    Fixed(f64),
}

#[derive(Debug, Clone)]
struct Interaction {
    video: Vec<BranchLayer>,
    audio: Option<Vec<BranchLayer>>,
    w_tv: MixWeight,
    w_ta: Option<MixWeight>,
}

/// Intermediate results of the interaction module.
#[derive(Debug, Clone)]
pub struct InteractionOutput {
    pub tv: Var,
    pub ta: Option<Var>,
    pub z_out: Var,
}

/// Every intermediate of one forward pass, for inspection and tests.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub augmented: Vec<Stream>,
    pub fused: Vec<Stream>,
    pub interaction: Option<InteractionOutput>,
    pub z_out: Var,
    pub scores: Var,
}

#[derive(Debug, Clone)]
pub struct CfsumModel {
    config: ModelConfig,
    store: ParamStore,
    encoders: [Option<Encoder>; 3],
    fusion: Vec<FusionLayer>,
    interaction: Option<Interaction>,
    head: Linear,
}

impl CfsumModel {
    /// Builds the parameter set for `config`. Two calls with the same config
    /// produce bit-identical parameters.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let dm = config.d_model;
        let hidden = config.ffn_hidden();
        let ln = config.use_layer_norm;
        let eps = config.layer_norm_eps;
        let mods = config.enabled_modalities;
        let mut store = ParamStore::new();

        let mut encoders: [Option<Encoder>; 3] = [None, None, None];
        for m in mods.iter() {
            let d = config.input_dim(m);
            let mut layers = Vec::new();
            if config.use_autoencoder {
                for l in 0..config.n_autoencoder_layers {
                    let prefix = format!("encoder.{m}.layer{l}");
                    layers.push(EncoderLayer {
                        attn: AttentionParams::init(
                            &mut store,
                            &format!("{prefix}.attn"),
                            d,
                            d,
                            d,
                            config.autoencoder_heads(m),
                            config.use_output_proj,
                            seed,
                        )?,
                        norm: Norm::maybe(&mut store, ln, &format!("{prefix}.norm"), d, eps)?,
                    });
                }
            }
            let proj = FeedForward::init(&mut store, &format!("encoder.{m}.proj"), d, hidden, dm, seed)?;
            encoders[m.slot()] = Some(Encoder { layers, proj });
        }

        let mut fusion = Vec::new();
        if config.use_fusion {
            for l in 0..config.n_fusion_layers {
                let prefix = format!("fusion.layer{l}");
                let attn = AttentionParams::init(
                    &mut store,
                    &format!("{prefix}.attn"),
                    dm,
                    dm,
                    dm,
                    config.n_heads,
                    config.use_output_proj,
                    seed,
                )?;
                let norm = Norm::maybe(&mut store, ln, &format!("{prefix}.norm"), dm, eps)?;
                let mut ffn: [Option<(FeedForward, Option<Norm>)>; 3] = [None, None, None];
                for m in mods.iter() {
                    let f = FeedForward::init(&mut store, &format!("{prefix}.ffn.{m}"), dm, hidden, dm, seed)?;
                    let n = Norm::maybe(&mut store, ln, &format!("{prefix}.ffn_norm.{m}"), dm, eps)?;
                    ffn[m.slot()] = Some((f, n));
                }
                fusion.push(FusionLayer { attn, norm, ffn });
            }
        }

        let interaction = if config.use_interaction {
            let branch = |store: &mut ParamStore, name: &str| -> Result<Vec<BranchLayer>> {
                (0..config.n_interaction_layers)
                    .map(|l| {
                        let prefix = format!("interaction.{name}.layer{l}");
                        let attn = AttentionParams::init(
                            store,
                            &format!("{prefix}.attn"),
                            dm,
                            dm,
                            dm,
                            config.n_heads,
                            config.use_output_proj,
                            seed,
                        )?;
                        let post = if config.interaction_residual {
                            Some(BranchPost {
                                norm1: Norm::maybe(store, ln, &format!("{prefix}.norm1"), dm, eps)?,
                                ffn: FeedForward::init(store, &format!("{prefix}.ffn"), dm, hidden, dm, seed)?,
                                norm2: Norm::maybe(store, ln, &format!("{prefix}.norm2"), dm, eps)?,
                            })
                        } else {
                            None
                        };
                        Ok(BranchLayer { attn, post })
                    })
                    .collect()
            };
            let mix = |store: &mut ParamStore, name: &str, init: f64| -> Result<MixWeight> {
                Ok(if config.interaction_weights_learnable {
                    MixWeight::Learned(store.add(format!("interaction.{name}"), Tensor::scalar(init))?)
                } else {
                    MixWeight::Fixed(init)
                })
            };
            let video = branch(&mut store, "video")?;
            let w_tv = mix(&mut store, "w_tv", config.w_tv_init)?;
            let (audio, w_ta) = if mods.audio {
                let layers = branch(&mut store, "audio")?;
                (Some(layers), Some(mix(&mut store, "w_ta", config.w_ta_init)?))
            } else {
                (None, None)
            };
            Some(Interaction {
                video,
                audio,
                w_tv,
                w_ta,
            })
        } else {
            None
        };

        let head = Linear::init(&mut store, "head", dm, 1, seed)?;

        Ok(Self {
            config,
            store,
            encoders,
            fusion,
            interaction,
            head,
        })
    }

    /// Rebuilds a model from a config and a full set of named parameters, as
    /// read from a checkpoint.
    pub fn from_params(config: ModelConfig, params: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut model = Self::init(config)?;
        let mut seen = 0;
        for (name, tensor) in params {
            let id = model
                .store
                .id_of(&name)
                .ok_or_else(|| Error::Data(format!("unexpected parameter `{name}`")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(Error::Data(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
            seen += 1;
        }
        if seen != model.store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {seen} of {} parameters",
                model.store.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Total number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.store.numel()
    }

    /// Current values of the interaction weights `(w_tv, w_ta)`.
    pub fn interaction_weights(&self) -> Option<(f64, Option<f64>)> {
        let inter = self.interaction.as_ref()?;
        let read = |w: &MixWeight| match *w {
            MixWeight::Learned(id) => self.store.get(id).data()[0],
            MixWeight::Fixed(v) => v,
        };
        Some((read(&inter.w_tv), inter.w_ta.as_ref().map(read)))
    }

    /// Overwrites the interaction weights, learned or fixed.
    pub fn set_interaction_weights(&mut self, w_tv: f64, w_ta: f64) {
        let Some(inter) = self.interaction.as_mut() else { return };
        let mut write = |w: &mut MixWeight, v: f64| match *w {
            MixWeight::Learned(id) => self.store.get_mut(id).data_mut()[0] = v,
            MixWeight::Fixed(ref mut f) => *f = v,
        };
        write(&mut inter.w_tv, w_tv);
        if let Some(w) = inter.w_ta.as_mut() {
            write(w, w_ta);
        }
    }

    /// Modal autoencoder: self-attention over the sequence (query, key and
    /// value all the input), residual add, optional layer norm, MLP into
    /// `d_model`, plus positional encodings.
    pub fn autoencoder_forward(&self, tape: &mut Tape, bound: &Bound, seq: &FeatureSequence) -> Result<Var> {
        let m = seq.modality;
        let enc = self.encoders[m.slot()]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{m} is not enabled in this model")))?;
        let d = self.config.input_dim(m);
        if seq.dim() != d {
            return Err(Error::shape(
                "modal_autoencoder",
                format!("{m} features have width {}, model expects {d}", seq.dim()),
            ));
        }
        let mut x = tape.leaf(&seq.features);
        for layer in &enc.layers {
            let att = multi_head_attention(tape, x, x, x, &layer.attn, bound, &seq.mask)?;
            x = tape.add(x, att)?;
            x = apply_norm(&layer.norm, tape, bound, x)?;
        }
        let x = enc.proj.forward(tape, bound, x)?;
        let pe = sinusoidal_positional_encoding(seq.len(), self.config.d_model)?;
        let pe = tape.leaf(&pe);
        tape.add(x, pe)
    }

    /// Modal fusion: joint self-attention over the concatenated streams with
    /// the concatenated padding mask, residual, split back by the original
    /// lengths, then a per-modality residual feed-forward network. Streams of
    /// disabled modalities are simply absent.
    pub fn fusion_forward(&self, tape: &mut Tape, bound: &Bound, streams: &[Stream]) -> Result<Vec<Stream>> {
        let dm = self.config.d_model;
        for s in streams {
            if tape.dims(s.x).1 != dm {
                return Err(Error::shape(
                    "modal_fusion",
                    format!("{} stream has width {}, expected {dm}", s.modality, tape.dims(s.x).1),
                ));
            }
        }
        let lengths: Vec<usize> = streams.iter().map(|s| tape.dims(s.x).0).collect();
        let masks: Vec<&PaddingMask> = streams.iter().map(|s| &s.mask).collect();
        let joint_mask = PaddingMask::concat(&masks)?;

        let mut current: Vec<Var> = streams.iter().map(|s| s.x).collect();
        for layer in &self.fusion {
            let z = tape.concat_rows(&current)?;
            let att = multi_head_attention(tape, z, z, z, &layer.attn, bound, &joint_mask)?;
            let z = tape.add(z, att)?;
            let z = apply_norm(&layer.norm, tape, bound, z)?;
            let parts = tape.split_rows(z, &lengths)?;
            current = Vec::with_capacity(parts.len());
            for (part, s) in parts.into_iter().zip(streams) {
                let (ffn, norm) = layer.ffn[s.modality.slot()]
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("{} is not enabled in this model", s.modality)))?;
                let h = ffn.forward(tape, bound, part)?;
                let h = tape.add(part, h)?;
                current.push(apply_norm(norm, tape, bound, h)?);
            }
        }
        Ok(streams
            .iter()
            .zip(current)
            .map(|(s, x)| Stream {
                modality: s.modality,
                x,
                mask: s.mask.clone(),
            })
            .collect())
    }

    fn branch_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layers: &[BranchLayer],
        x: &Stream,
        text: Option<&Stream>,
    ) -> Result<Var> {
        let mut h = x.x;
        for layer in layers {
            let (kv, kv_mask) = match text {
                Some(t) => (t.x, &t.mask),
                None => (h, &x.mask),
            };
            let att = multi_head_attention(tape, h, kv, kv, &layer.attn, bound, kv_mask)?;
            h = match &layer.post {
                None => att,
                Some(post) => {
                    let r = tape.add(h, att)?;
                    let r = apply_norm(&post.norm1, tape, bound, r)?;
                    let f = post.ffn.forward(tape, bound, r)?;
                    let r = tape.add(r, f)?;
                    apply_norm(&post.norm2, tape, bound, r)?
                }
            };
        }
        Ok(h)
    }

    fn mix_var(&self, tape: &mut Tape, bound: &Bound, w: &MixWeight) -> Result<Var> {
        match *w {
            MixWeight::Learned(id) => Ok(bound[id]),
            MixWeight::Fixed(v) => tape.constant(1, 1, vec![v]),
        }
    }

    /// Feature interaction: video (and audio) streams query the text tokens,
    /// giving clip-aligned branch outputs `tv`, `ta`; the result is
    /// `w_tv * tv + w_ta * ta`. Without text each branch attends over its own
    /// modality instead.
    pub fn interaction_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        video: &Stream,
        audio: Option<&Stream>,
        text: Option<&Stream>,
    ) -> Result<InteractionOutput> {
        let inter = self
            .interaction
            .as_ref()
            .ok_or_else(|| Error::Contract("the interaction module is disabled".into()))?;
        let n_c = tape.dims(video.x).0;
        let tv = self.branch_forward(tape, bound, &inter.video, video, text)?;
        let w_tv = self.mix_var(tape, bound, &inter.w_tv)?;
        let mut z_out = tape.scale_by(tv, w_tv)?;
        let mut ta = None;
        if let Some(a) = audio {
            let n_a = tape.dims(a.x).0;
            if n_a != n_c {
                return Err(Error::shape(
                    "feature_interaction",
                    format!("video has {n_c} clips but audio has {n_a}"),
                ));
            }
            let (layers, w) = inter
                .audio
                .as_ref()
                .zip(inter.w_ta.as_ref())
                .ok_or_else(|| Error::Contract("audio is not enabled in this model".into()))?;
            let out = self.branch_forward(tape, bound, layers, a, text)?;
            let w_ta = self.mix_var(tape, bound, w)?;
            let weighted = tape.scale_by(out, w_ta)?;
            z_out = tape.add(z_out, weighted)?;
            ta = Some(out);
        }
        Ok(InteractionOutput { tv, ta, z_out })
    }

    /// Linear head: one unbounded score per row of `z_out`, as an `n x 1`
    /// node.
    pub fn head_forward(&self, tape: &mut Tape, bound: &Bound, z_out: Var) -> Result<Var> {
        self.head.forward(tape, bound, z_out)
    }

    /// Full forward pass restricted to `active` modalities (a subset of the
    /// enabled ones that the sample provides).
    pub fn trace(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        sample: &MultiModalSample,
        active: ModalitySet,
    ) -> Result<ForwardTrace> {
        if !active.is_subset_of(self.config.enabled_modalities) {
            return Err(Error::Contract(format!(
                "modalities `{}` are not all enabled (model has `{}`)",
                active.letters(),
                self.config.enabled_modalities.letters()
            )));
        }
        let mut sequences = vec![&sample.video];
        for (m, seq) in [(Modality::Audio, &sample.audio), (Modality::Text, &sample.text)] {
            if active.contains(m) {
                let seq = seq
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("sample `{}` has no {m} features", sample.sample_id)))?;
                sequences.push(seq);
            }
        }

        let mut augmented = Vec::with_capacity(sequences.len());
        for seq in sequences {
            augmented.push(Stream {
                modality: seq.modality,
                x: self.autoencoder_forward(tape, bound, seq)?,
                mask: seq.mask.clone(),
            });
        }

        let fused = if self.config.use_fusion {
            self.fusion_forward(tape, bound, &augmented)?
        } else {
            augmented.clone()
        };
        let find = |m: Modality| fused.iter().find(|s| s.modality == m);
        let video = find(Modality::Video).expect("video stream is always present");

        let (interaction, z_out) = if self.config.use_interaction {
            let out = self.interaction_forward(tape, bound, video, find(Modality::Audio), find(Modality::Text))?;
            let z = out.z_out;
            (Some(out), z)
        } else {
            (None, video.x)
        };
        let scores = self.head_forward(tape, bound, z_out)?;
        Ok(ForwardTrace {
            augmented,
            fused,
            interaction,
            z_out,
            scores,
        })
    }

    /// Scores node for `sample` using every enabled modality.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, sample: &MultiModalSample) -> Result<Var> {
        Ok(self.trace(tape, bound, sample, self.config.enabled_modalities)?.scores)
    }

    pub fn predict(&self, sample: &MultiModalSample) -> Result<SaliencyPrediction> {
        self.predict_with(sample, self.config.enabled_modalities)
    }

    pub fn predict_with(&self, sample: &MultiModalSample, active: ModalitySet) -> Result<SaliencyPrediction> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let scores = self.trace(&mut tape, &bound, sample, active)?.scores;
        let scores = tape.value(scores).to_vec();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite saliency score for sample `{}`",
                sample.sample_id
            )));
        }
        Ok(SaliencyPrediction {
            scores,
            valid: sample.video.mask.valid().to_vec(),
        })
    }

    /// Loss of `sample` without gradients.
    pub fn loss(&self, sample: &MultiModalSample) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let scores = self.forward(&mut tape, &bound, sample)?;
        let loss = mse_loss(&mut tape, scores, &sample.saliency, sample.video.mask.valid())?;
        tape.scalar(loss)
    }

    /// Loss of `sample` and its gradient for every parameter, in store order.
    pub fn loss_and_grads(&self, sample: &MultiModalSample) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, true);
        let scores = self.forward(&mut tape, &bound, sample)?;
        let loss = mse_loss(&mut tape, scores, &sample.saliency, sample.video.mask.valid())?;
        tape.backward(loss)?;
        Ok((tape.scalar(loss)?, bound.grads(&tape)))
    }
}

/// Mean squared error over the valid clips:
/// `(1/n_valid) * sum_valid (s_i - s_hat_i)^2`.
pub fn mse_loss(tape: &mut Tape, scores: Var, truth: &[f64], valid: &[bool]) -> Result<Var> {
    let n = tape.dims(scores).0 * tape.dims(scores).1;
    if truth.len() != n || valid.len() != n {
        return Err(Error::shape(
            "mse_loss",
            format!("{n} predictions, {} labels, {} mask entries", truth.len(), valid.len()),
        ));
    }
    if truth.iter().any(|t| !t.is_finite()) {
        return Err(Error::Data("saliency labels must be finite".into()));
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::Contract("mse_loss needs at least one valid clip".into()));
    }
    let (r, c) = tape.dims(scores);
    let target = tape.constant(r, c, truth.to_vec())?;
    let diff = tape.sub(scores, target)?;
    let sq = tape.mul(diff, diff)?;
    let sq = if n_valid == n {
        sq
    } else {
        let weights = tape.constant(r, c, valid.iter().map(|&v| f64::from(u8::from(v))).collect())?;
        tape.mul(sq, weights)?
    };
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n_valid as f64))
}

#[cfg(test)]
mod tests;
