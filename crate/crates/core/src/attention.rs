//! Multi-head scaled dot-product attention and sinusoidal positional
//! encodings.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-position validity flags for a sequence. At least one position is
/// always valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddingMask {
    valid: Vec<bool>,
}

impl PaddingMask {
    pub fn new(valid: Vec<bool>) -> Result<Self> {
        if !valid.iter().any(|&v| v) {
            return Err(Error::Contract(
                "padding mask needs at least one valid position".into(),
            ));
        }
        Ok(Self { valid })
    }

    pub fn all_valid(n: usize) -> Self {
        assert!(n > 0, "empty sequence has no valid position");
        Self {
            valid: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn concat(masks: &[&PaddingMask]) -> Result<Self> {
        Self::new(masks.iter().flat_map(|m| m.valid.iter().copied()).collect())
    }
}

/// Projection weights of one multi-head attention layer.
///
/// `w_q` is `d_q x d_model`; `w_k`, `w_v` are `d_kv x d_model`; the optional
/// output mixing `w_o` is `d_model x d_model`. Each head works on a
/// `d_k = d_model / n_heads` slice and scales its logits by `1/sqrt(d_k)`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: Option<ParamId>,
    pub n_heads: usize,
    pub d_model: usize,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_q: usize,
        d_kv: usize,
        d_model: usize,
        n_heads: usize,
        use_output_proj: bool,
        seed: u64,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "{prefix}: d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let w_q = store.add_uniform(&format!("{prefix}.w_q"), vec![d_q, d_model], d_q, seed)?;
        let w_k = store.add_uniform(&format!("{prefix}.w_k"), vec![d_kv, d_model], d_kv, seed)?;
        let w_v = store.add_uniform(&format!("{prefix}.w_v"), vec![d_kv, d_model], d_kv, seed)?;
        let w_o = if use_output_proj {
            Some(store.add_uniform(
                &format!("{prefix}.w_o"),
                vec![d_model, d_model],
                d_model,
                seed,
            )?)
        } else {
            None
        };
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            n_heads,
            d_model,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Scalar parameter count of a layer with these dimensions.
    pub fn param_count(d_q: usize, d_kv: usize, d_model: usize, use_output_proj: bool) -> usize {
        d_q * d_model + 2 * d_kv * d_model + if use_output_proj { d_model * d_model } else { 0 }
    }
}

/// `concat_h(softmax(Q_h K_h^T / sqrt(d_k), mask) V_h) W_o` with
/// `Q = q_in W_q`, `K = k_in W_k`, `V = v_in W_v`.
///
/// Keys whose mask entry is false receive zero attention weight. The output
/// always has one row per query row.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    params: &AttentionParams,
    bound: &Bound,
    key_mask: &PaddingMask,
) -> Result<Var> {
    let n_q = tape.dims(q_in).0;
    let n_k = tape.dims(k_in).0;
    if tape.dims(v_in).0 != n_k {
        return Err(Error::shape(
            "multi_head_attention",
            format!("{n_k} keys but {} values", tape.dims(v_in).0),
        ));
    }
    if key_mask.len() != n_k {
        return Err(Error::shape(
            "multi_head_attention",
            format!("mask of length {} for {n_k} keys", key_mask.len()),
        ));
    }

    let q = tape.matmul(q_in, bound[params.w_q])?;
    let k = tape.matmul(k_in, bound[params.w_k])?;
    let v = tape.matmul(v_in, bound[params.w_v])?;
    let kt = tape.transpose(k);

    let d_k = params.d_k();
    let scale = 1.0 / (d_k as f64).sqrt();
    let all_valid = key_mask.count_valid() == n_k;
    let mask: Vec<bool> = if all_valid {
        Vec::new()
    } else {
        (0..n_q).flat_map(|_| key_mask.valid().iter().copied()).collect()
    };

    let mut heads = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let q_h = tape.slice_cols(q, h * d_k, d_k)?;
        let kt_h = tape.slice_rows(kt, h * d_k, d_k)?;
        let v_h = tape.slice_cols(v, h * d_k, d_k)?;
        let logits = tape.matmul(q_h, kt_h)?;
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax_rows(logits, (!all_valid).then_some(mask.as_slice()))?;
        heads.push(tape.matmul(weights, v_h)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    match params.w_o {
        Some(w_o) => tape.matmul(joined, bound[w_o]),
        None => Ok(joined),
    }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_positional_encoding(n: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding width must be even, got {d}"
        )));
    }
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = angle.sin();
            data[p * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(n, d, data)
}
