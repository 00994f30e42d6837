use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Video, Modality::Audio, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }

    pub(crate) fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A subset of modalities. Serialized as a list of names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Modality>", into = "Vec<Modality>")]
pub struct ModalitySet {
    pub video: bool,
    pub audio: bool,
    pub text: bool,
}

impl ModalitySet {
    pub const VAT: ModalitySet = ModalitySet {
        video: true,
        audio: true,
        text: true,
    };
    pub const VIDEO: ModalitySet = ModalitySet {
        video: true,
        audio: false,
        text: false,
    };

    pub fn contains(self, m: Modality) -> bool {
        match m {
            Modality::Video => self.video,
            Modality::Audio => self.audio,
            Modality::Text => self.text,
        }
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.contains(m))
    }

    pub fn is_subset_of(self, other: ModalitySet) -> bool {
        self.iter().all(|m| other.contains(m))
    }

    pub fn intersect(self, other: ModalitySet) -> ModalitySet {
        ModalitySet {
            video: self.video && other.video,
            audio: self.audio && other.audio,
            text: self.text && other.text,
        }
    }

    /// Compact letter form, e.g. `vat`.
    pub fn letters(self) -> String {
        self.iter().map(|m| &m.name()[..1]).collect()
    }
}

impl Default for ModalitySet {
    fn default() -> Self {
        Self::VAT
    }
}

impl TryFrom<Vec<Modality>> for ModalitySet {
    type Error = String;

    fn try_from(list: Vec<Modality>) -> Result<Self, String> {
        let set = ModalitySet {
            video: list.contains(&Modality::Video),
            audio: list.contains(&Modality::Audio),
            text: list.contains(&Modality::Text),
        };
        if !set.video {
            return Err("the video modality is always required".into());
        }
        Ok(set)
    }
}

impl From<ModalitySet> for Vec<Modality> {
    fn from(set: ModalitySet) -> Self {
        set.iter().collect()
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    /// Parses letter forms such as `v`, `va`, `vt`, `vat`.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = ModalitySet {
            video: false,
            audio: false,
            text: false,
        };
        for ch in s.chars() {
            match ch {
                'v' => set.video = true,
                'a' => set.audio = true,
                't' => set.text = true,
                other => {
                    return Err(Error::Config(format!("unknown modality letter `{other}` in `{s}`")))
                }
            }
        }
        if !set.video {
            return Err(Error::Config(format!("modality set `{s}` must include video")));
        }
        Ok(set)
    }
}

/// Architecture hyperparameters. The parameter set is a pure function of this
/// value (including `seed`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_video: usize,
    pub d_audio: usize,
    pub d_text: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Hidden width of every MLP / FFN; `4 * d_model` when unset.
    pub ffn_hidden: Option<usize>,
    pub n_autoencoder_layers: usize,
    pub n_fusion_layers: usize,
    pub n_interaction_layers: usize,
    pub use_layer_norm: bool,
    pub layer_norm_eps: f64,
    pub use_output_proj: bool,
    pub enabled_modalities: ModalitySet,
    pub w_tv_init: f64,
    pub w_ta_init: f64,
    pub interaction_weights_learnable: bool,
    /// Residual connection plus feed-forward sublayer around each
    /// cross-attention branch. When false a branch is the bare attention
    /// output.
    pub interaction_residual: bool,
    pub use_autoencoder: bool,
    pub use_fusion: bool,
    pub use_interaction: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_video: 16,
            d_audio: 16,
            d_text: 16,
            d_model: 64,
            n_heads: 8,
            ffn_hidden: None,
            n_autoencoder_layers: 1,
            n_fusion_layers: 1,
            n_interaction_layers: 1,
            use_layer_norm: true,
            layer_norm_eps: 1e-5,
            use_output_proj: true,
            enabled_modalities: ModalitySet::VAT,
            w_tv_init: 2.0,
            w_ta_init: 1.0,
            interaction_weights_learnable: true,
            interaction_residual: true,
            use_autoencoder: true,
            use_fusion: true,
            use_interaction: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d_model)
    }

    pub fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Video => self.d_video,
            Modality::Audio => self.d_audio,
            Modality::Text => self.d_text,
        }
    }

    /// Heads used by the autoencoder of a modality, whose attention runs at
    /// the native feature width: the largest divisor of that width not
    /// exceeding `n_heads`.
    pub fn autoencoder_heads(&self, m: Modality) -> usize {
        let d = self.input_dim(m);
        (1..=self.n_heads.min(d)).rev().find(|h| d.is_multiple_of(*h)).unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !self.enabled_modalities.video {
            return fail("video must be enabled".into());
        }
        for m in self.enabled_modalities.iter() {
            if self.input_dim(m) == 0 {
                return fail(format!("d_{m} must be positive"));
            }
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model must be positive and even, got {}", self.d_model));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_hidden() == 0 {
            return fail("ffn_hidden must be positive".into());
        }
        if !self.w_tv_init.is_finite() || !self.w_ta_init.is_finite() {
            return fail("interaction weight initial values must be finite".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        if self.use_fusion && self.n_fusion_layers == 0 {
            return fail("n_fusion_layers must be at least 1 when fusion is used".into());
        }
        if self.use_interaction && self.n_interaction_layers == 0 {
            return fail("n_interaction_layers must be at least 1 when interaction is used".into());
        }
        if self.use_autoencoder && self.n_autoencoder_layers == 0 {
            return fail("n_autoencoder_layers must be at least 1 when autoencoders are used".into());
        }
        Ok(())
    }

    /// Closed-form scalar parameter count for this configuration.
    ///
    /// A dense layer `a -> b` has `a*b + b` scalars, a two-layer MLP
    /// `a -> h -> b` has `a*h + h + h*b + b`, an attention layer
    /// `d_q*m + 2*d_kv*m (+ m*m with the output projection)`, and a layer norm
    /// of width `d` has `2*d`.
    pub fn expected_param_count(&self) -> usize {
        let dm = self.d_model;
        let h = self.ffn_hidden();
        let mlp = |a: usize, b: usize| a * h + h + h * b + b;
        let norm = |d: usize| if self.use_layer_norm { 2 * d } else { 0 };
        let attn = |dq: usize, dkv: usize| AttentionParams::param_count(dq, dkv, dm, self.use_output_proj);
        let mods = self.enabled_modalities;

        let mut total = 0;
        for m in mods.iter() {
            let d = self.input_dim(m);
            if self.use_autoencoder {
                total += self.n_autoencoder_layers
                    * (AttentionParams::param_count(d, d, d, self.use_output_proj) + norm(d));
            }
            total += mlp(d, dm);
        }
        if self.use_fusion {
            let per_layer = attn(dm, dm) + norm(dm) + mods.iter().count() * (mlp(dm, dm) + norm(dm));
            total += self.n_fusion_layers * per_layer;
        }
        if self.use_interaction {
            let branches = 1 + usize::from(mods.audio);
            let per_branch = attn(dm, dm)
                + if self.interaction_residual {
                    norm(dm) + mlp(dm, dm) + norm(dm)
                } else {
                    0
                };
            total += self.n_interaction_layers * branches * per_branch;
            if self.interaction_weights_learnable {
                total += branches;
            }
        }
        total + dm + 1
    }
}
