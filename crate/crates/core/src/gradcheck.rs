//! Central finite differences as an independent gradient oracle, and the
//! check suite run by `cfsum gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head_attention, AttentionParams, PaddingMask};
use crate::data::MultiModalSample;
use crate::error::Result;
use crate::model::{mse_loss, CfsumModel, FeatureSequence, Modality, ModalitySet, ModelConfig};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used by the suite.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of [`rel_error`]. Central differences at `h = 1e-5`
/// carry roundoff of about `1e-10` in absolute terms, so gradients smaller
/// than the floor are compared absolutely instead of relatively.
pub const REL_FLOOR: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as input")
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub n_coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Checks the gradient of `sum(build(inputs) * R)` for a fixed random `R`
/// with respect to every input tensor.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    rng: &mut impl Rng,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let out_dims = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x)).collect();
        let out = build(&mut t, &vars)?;
        t.dims(out)
    };
    let weights: Vec<f64> = (0..out_dims.0 * out_dims.1).map(|_| rng.random_range(-1.0..1.0)).collect();

    let loss = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let w = tape.constant(out_dims.0, out_dims.1, weights.clone())?;
        let p = tape.mul(out, w)?;
        Ok(tape.sum(p))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(&x.clone().with_requires_grad(true)))
        .collect();
    let l = loss(&mut tape, &vars)?;
    tape.backward(l)?;

    let mut worst: f64 = 0.0;
    let mut n_coords = 0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad_or_zeros(vars[i]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, other)| t.leaf(if j == i { probe } else { other }))
                    .collect();
                let l = loss(&mut t, &vs).expect("forward succeeded once");
                t.scalar(l).expect("scalar loss")
            },
            x,
            STEP,
        );
        worst = worst.max(max_rel_error(&analytic, numeric.data()));
        n_coords += x.numel();
    }
    Ok(CheckResult {
        name: name.to_owned(),
        max_rel_error: worst,
        n_coords,
    })
}

/// Checks the full loss gradient with respect to every model parameter.
pub fn check_model(name: &str, model: &CfsumModel, sample: &MultiModalSample) -> Result<CheckResult> {
    let (_, grads) = model.loss_and_grads(sample)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut n_coords = 0;
    let ids: Vec<_> = model.params().ids().collect();
    for (id, analytic) in ids.into_iter().zip(grads) {
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.params().get(id).data()[i];
            probe.params_mut().get_mut(id).data_mut()[i] = orig + STEP;
            let up = probe.loss(sample)?;
            probe.params_mut().get_mut(id).data_mut()[i] = orig - STEP;
            let down = probe.loss(sample)?;
            probe.params_mut().get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_error(a, (up - down) / (2.0 * STEP)));
            n_coords += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_owned(),
        max_rel_error: worst,
        n_coords,
    })
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("positive dims")
}

/// A random sample with every modality in `mods` present, features and
/// labels uniform in `[-1, 1]` and `[0, 1]`.
pub fn random_sample(
    rng: &mut impl Rng,
    config: &ModelConfig,
    mods: ModalitySet,
    n_c: usize,
    n_t: usize,
) -> MultiModalSample {
    let seq = |rng: &mut _, m: Modality, n: usize| {
        FeatureSequence::dense(m, random_tensor(rng, n, config.input_dim(m))).expect("dense")
    };
    let video = seq(rng, Modality::Video, n_c);
    let audio = mods.audio.then(|| seq(rng, Modality::Audio, n_c));
    let text = mods.text.then(|| seq(rng, Modality::Text, n_t));
    let labels = (0..n_c).map(|_| rng.random_range(0.0..1.0)).collect();
    MultiModalSample::new("random", video, audio, text, labels).expect("consistent sample")
}

/// The small configuration used for end-to-end checks: 4-dimensional inputs,
/// `d_model = 8`, two heads.
pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_video: 4,
        d_audio: 4,
        d_text: 4,
        d_model: 8,
        n_heads: 2,
        ffn_hidden: Some(16),
        seed,
        ..Default::default()
    }
}

fn op_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let r = |rng: &mut ChaCha8Rng, a, b| random_tensor(rng, a, b);

    let (a, b) = (r(rng, 3, 4), r(rng, 4, 2));
    out.push(check_op("matmul", &[a, b], rng, |t, v| t.matmul(v[0], v[1]))?);
    let a = r(rng, 3, 5);
    out.push(check_op("transpose", &[a], rng, |t, v| Ok(t.transpose(v[0])))?);
    let (a, b) = (r(rng, 3, 4), r(rng, 3, 4));
    out.push(check_op("add", &[a.clone(), b.clone()], rng, |t, v| t.add(v[0], v[1]))?);
    out.push(check_op("sub", &[a.clone(), b.clone()], rng, |t, v| t.sub(v[0], v[1]))?);
    out.push(check_op("mul", &[a.clone(), b], rng, |t, v| t.mul(v[0], v[1]))?);
    out.push(check_op("scale", std::slice::from_ref(&a), rng, |t, v| Ok(t.scale(v[0], -1.7)))?);
    let s = r(rng, 1, 1);
    out.push(check_op("scale_by", &[a.clone(), s], rng, |t, v| t.scale_by(v[0], v[1]))?);
    let bias = r(rng, 1, 4);
    out.push(check_op("add_row", &[a, bias], rng, |t, v| t.add_row(v[0], v[1]))?);

    // Keep relu inputs away from the kink.
    let mut a = r(rng, 4, 4);
    for x in a.data_mut() {
        *x = x.signum() * (0.1 + x.abs());
    }
    out.push(check_op("relu", &[a], rng, |t, v| Ok(t.relu(v[0])))?);

    let a = r(rng, 3, 5);
    out.push(check_op("softmax_rows", std::slice::from_ref(&a), rng, |t, v| t.softmax_rows(v[0], None))?);
    let mask: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
    out.push(check_op("softmax_rows_masked", &[a], rng, move |t, v| t.softmax_rows(v[0], Some(&mask)))?);

    let parts = [r(rng, 2, 3), r(rng, 1, 3), r(rng, 3, 3)];
    out.push(check_op("concat_rows", &parts, rng, |t, v| t.concat_rows(v))?);
    let a = r(rng, 6, 3);
    out.push(check_op("split_rows", std::slice::from_ref(&a), rng, |t, v| {
        let p = t.split_rows(v[0], &[2, 1, 3])?;
        let p2 = t.scale(p[2], 2.0);
        t.concat_rows(&[p2, p[0], p[1]])
    })?);
    out.push(check_op("slice_cols", &[a], rng, |t, v| t.slice_cols(v[0], 1, 2))?);
    let parts = [r(rng, 3, 2), r(rng, 3, 1)];
    out.push(check_op("concat_cols", &parts, rng, |t, v| t.concat_cols(v))?);

    let (x, g, b) = (r(rng, 3, 5), r(rng, 1, 5), r(rng, 1, 5));
    out.push(check_op("layer_norm", &[x, g, b], rng, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))?);
    let a = r(rng, 2, 3);
    out.push(check_op("sum", &[a], rng, |t, v| Ok(t.sum(v[0])))?);

    // Attention with respect to inputs and all four projections.
    let mut store = ParamStore::new();
    let attn = AttentionParams::init(&mut store, "attn", 4, 3, 6, 2, true, 0)?;
    let mut inputs = vec![r(rng, 3, 4), r(rng, 5, 3), r(rng, 5, 3)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let key_mask = PaddingMask::new(vec![true, true, false, true, true])?;
    out.push(check_op("multi_head_attention", &inputs, rng, |t, v| {
        let bound = Bound::from_vars(v[3..].to_vec());
        multi_head_attention(t, v[0], v[1], v[2], &attn, &bound, &key_mask)
    })?);

    let scores = r(rng, 4, 1);
    let truth = vec![0.0, 1.0, 0.5, 0.25];
    out.push(check_op("mse_loss", &[scores], rng, move |t, v| {
        mse_loss(t, v[0], &truth, &[true, false, true, true])
    })?);
    Ok(out)
}

/// End-to-end checks on a 3-clip / 2-token instance with `d_model = 8`, for
/// the default model, the variant without layer norm, the bare
/// cross-attention interaction and the layers in isolation.
fn model_checks(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<CheckResult>> {
    let base = small_config(seed);
    let variants = [
        ("cfsum_loss", base.clone()),
        (
            "cfsum_loss_no_layer_norm",
            ModelConfig {
                use_layer_norm: false,
                ..base.clone()
            },
        ),
        (
            "cfsum_loss_bare_interaction",
            ModelConfig {
                interaction_residual: false,
                use_output_proj: false,
                ..base.clone()
            },
        ),
        (
            "cfsum_loss_autoencoder_head_only",
            ModelConfig {
                use_fusion: false,
                use_interaction: false,
                ..base.clone()
            },
        ),
        (
            "cfsum_loss_video_text",
            ModelConfig {
                enabled_modalities: "vt".parse()?,
                ..base
            },
        ),
    ];
    let mut out = Vec::with_capacity(variants.len());
    for (name, config) in variants {
        let mods = config.enabled_modalities;
        let model = CfsumModel::init(config)?;
        let sample = random_sample(rng, model.config(), mods, 3, 2);
        out.push(check_model(name, &model, &sample)?);
    }
    Ok(out)
}

/// Runs every check for one seed.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = op_checks(&mut rng)?;
    results.extend(model_checks(&mut rng, seed)?);
    Ok(results)
}
