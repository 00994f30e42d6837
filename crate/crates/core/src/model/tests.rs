use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::sinusoidal_positional_encoding;
use crate::gradcheck::{random_sample, small_config};

fn model(config: ModelConfig) -> CfsumModel {
    CfsumModel::init(config).unwrap()
}

fn sample(config: &ModelConfig, n_c: usize, n_t: usize, seed: u64) -> MultiModalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_sample(&mut rng, config, ModalitySet::VAT, n_c, n_t)
}

fn zero_param(m: &mut CfsumModel, name: &str) {
    let id = m.params().id_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    m.params_mut().get_mut(id).data_mut().fill(0.0);
}

#[test]
fn init_is_deterministic_in_the_seed() {
    let a = model(small_config(4));
    let b = model(small_config(4));
    assert!(a.params().bit_eq(b.params()));
    let c = model(small_config(5));
    assert!(!a.params().bit_eq(c.params()));
}

#[test]
fn interaction_weights_start_at_config_values() {
    let m = model(ModelConfig::default());
    assert_eq!(m.interaction_weights(), Some((2.0, Some(1.0))));
    let vt = model(ModelConfig {
        enabled_modalities: "vt".parse().unwrap(),
        ..ModelConfig::default()
    });
    assert_eq!(vt.interaction_weights(), Some((2.0, None)));
}

#[test]
fn uniform_init_stays_within_fan_in_bound() {
    let m = model(small_config(0));
    let id = m.params().id_of("head.weight").unwrap();
    let bound = 1.0 / (8f64).sqrt();
    assert!(m.params().get(id).data().iter().all(|w| w.abs() < bound));
}

#[test]
fn parameter_count_matches_closed_form() {
    let base = small_config(0);
    let variants = [
        base.clone(),
        ModelConfig { use_layer_norm: false, ..base.clone() },
        ModelConfig { use_output_proj: false, ..base.clone() },
        ModelConfig { interaction_residual: false, ..base.clone() },
        ModelConfig { interaction_weights_learnable: false, ..base.clone() },
        ModelConfig { use_fusion: false, ..base.clone() },
        ModelConfig { use_interaction: false, ..base.clone() },
        ModelConfig { use_autoencoder: false, ..base.clone() },
        ModelConfig { enabled_modalities: "vt".parse().unwrap(), ..base.clone() },
        ModelConfig { enabled_modalities: ModalitySet::VIDEO, ..base.clone() },
        ModelConfig { n_fusion_layers: 2, n_interaction_layers: 3, n_autoencoder_layers: 2, ..base.clone() },
        ModelConfig::default(),
    ];
    for cfg in variants {
        let m = model(cfg.clone());
        assert_eq!(m.count_params(), cfg.expected_param_count(), "{cfg:?}");
    }
}

#[test]
fn parameter_count_deltas() {
    let base = small_config(0);
    let learned = model(base.clone()).count_params();
    let fixed = model(ModelConfig { interaction_weights_learnable: false, ..base.clone() }).count_params();
    assert_eq!(learned - fixed, 2);

    let m = model(base.clone());
    let head: usize = ["head.weight", "head.bias"]
        .iter()
        .map(|n| m.params().get(m.params().id_of(n).unwrap()).numel())
        .sum();
    assert_eq!(head, base.d_model + 1);

    // Each feed-forward network has (d_in + 1) h + (h + 1) d_out parameters,
    // so one extra hidden unit adds d_in + 1 + d_out. There are 3 encoder
    // projections (4 -> h -> 8), 3 fusion FFNs and 2 interaction FFNs
    // (8 -> h -> 8).
    let wider = model(ModelConfig { ffn_hidden: Some(17), ..base }).count_params();
    assert_eq!(wider - learned, 3 * (4 + 1 + 8) + 5 * (8 + 1 + 8));
}

#[test]
fn zero_mlp_output_leaves_only_positional_encoding() {
    let cfg = small_config(1);
    let mut m = model(cfg.clone());
    zero_param(&mut m, "encoder.video.proj.fc2.weight");
    zero_param(&mut m, "encoder.video.proj.fc2.bias");
    let s = sample(&cfg, 5, 2, 0);
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape, false);
    let tr = m.trace(&mut tape, &bound, &s, ModalitySet::VAT).unwrap();
    let pe = sinusoidal_positional_encoding(5, cfg.d_model).unwrap();
    assert_eq!(tape.value(tr.augmented[0].x), pe.data());
    // Row 0 of the encoding alternates sin(0) = 0 and cos(0) = 1.
    assert_eq!(&tape.value(tr.augmented[0].x)[..4], &[0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn prediction_length_equals_clip_count() {
    let cfg = small_config(2);
    let m = model(cfg.clone());
    for mods in ["v", "va", "vt", "vat"] {
        let active: ModalitySet = mods.parse().unwrap();
        for n_c in 1..=4 {
            for n_t in 1..=3 {
                let s = sample(&cfg, n_c, n_t, (n_c * 10 + n_t) as u64);
                let p = m.predict_with(&s, active).unwrap();
                assert_eq!(p.scores.len(), n_c);
            }
        }
    }
}

#[test]
fn padded_rows_do_not_leak() {
    let cfg = small_config(3);
    let m = model(cfg.clone());
    let mut s = sample(&cfg, 5, 3, 1);
    let clip_mask = PaddingMask::new(vec![true, true, false, true, false]).unwrap();
    s.video.mask = clip_mask.clone();
    s.audio.as_mut().unwrap().mask = clip_mask;
    s.text.as_mut().unwrap().mask = PaddingMask::new(vec![true, false, true]).unwrap();
    let before = m.predict(&s).unwrap();

    let mut noisy = s.clone();
    for (seq, rows) in [
        (&mut noisy.video, &[2usize, 4][..]),
        (noisy.audio.as_mut().unwrap(), &[2, 4]),
        (noisy.text.as_mut().unwrap(), &[1]),
    ] {
        let d = seq.dim();
        for &r in rows {
            for j in 0..d {
                seq.features.data_mut()[r * d + j] = 1e3 * (j as f64 + 1.0);
            }
        }
    }
    let after = m.predict(&noisy).unwrap();
    for i in [0, 1, 3] {
        assert_eq!(before.scores[i], after.scores[i]);
    }
    assert_eq!(after.valid, vec![true, true, false, true, false]);
}

#[test]
fn mixing_is_linear_in_the_weights() {
    let cfg = small_config(4);
    let s = sample(&cfg, 4, 2, 2);
    let z_out = |w_tv: f64, w_ta: f64| {
        let mut m = model(cfg.clone());
        m.set_interaction_weights(w_tv, w_ta);
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape, false);
        let tr = m.trace(&mut tape, &bound, &s, ModalitySet::VAT).unwrap();
        let inter = tr.interaction.unwrap();
        (
            tape.value(tr.z_out).to_vec(),
            tape.value(inter.tv).to_vec(),
            tape.value(inter.ta.unwrap()).to_vec(),
        )
    };
    let (z1, tv, ta) = z_out(2.0, 1.0);
    let (z2, _, _) = z_out(4.0, 2.0);
    for (a, b) in z1.iter().zip(&z2) {
        assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
    let (z0, _, _) = z_out(1.5, 0.0);
    for (i, z) in z0.iter().enumerate() {
        assert_eq!(*z, 1.5 * tv[i]);
    }
    for (i, z) in z1.iter().enumerate() {
        assert_eq!(*z, 2.0 * tv[i] + ta[i]);
    }
}

#[test]
fn zero_head_scores_zero() {
    let cfg = small_config(5);
    let mut m = model(cfg.clone());
    zero_param(&mut m, "head.weight");
    zero_param(&mut m, "head.bias");
    let p = m.predict(&sample(&cfg, 6, 2, 3)).unwrap();
    assert_eq!(p.scores, vec![0.0; 6]);
}

#[test]
fn mse_examples() {
    let run = |scores: Vec<f64>, truth: &[f64], valid: &[bool]| {
        let mut tape = Tape::new();
        let n = scores.len();
        let s = tape.constant(n, 1, scores).unwrap();
        let l = mse_loss(&mut tape, s, truth, valid).unwrap();
        tape.scalar(l).unwrap()
    };
    assert_eq!(run(vec![0.2, 0.9], &[0.2, 0.9], &[true, true]), 0.0);
    assert_eq!(run(vec![1.0, 0.0], &[0.0, 0.0], &[true, true]), 0.5);
    assert_eq!(run(vec![1.0, 5.0], &[0.0, 0.0], &[true, false]), 1.0);

    let mut tape = Tape::new();
    let s = tape.constant(2, 1, vec![0.0, 0.0]).unwrap();
    assert!(matches!(mse_loss(&mut tape, s, &[0.0, 0.0], &[false, false]), Err(Error::Contract(_))));
    assert!(matches!(mse_loss(&mut tape, s, &[f64::NAN, 0.0], &[true, true]), Err(Error::Data(_))));
    assert!(matches!(mse_loss(&mut tape, s, &[0.0], &[true]), Err(Error::Shape { .. })));
}

#[test]
fn missing_modalities_fall_back_to_the_video_only_model() {
    let vat = small_config(6);
    let v_only = ModelConfig {
        enabled_modalities: ModalitySet::VIDEO,
        ..vat.clone()
    };
    let full = model(vat.clone());
    let small = model(v_only);
    let s = sample(&vat, 5, 3, 4);
    let a = full.predict_with(&s, ModalitySet::VIDEO).unwrap();
    let b = small.predict(&s).unwrap();
    assert_eq!(a.scores, b.scores);
}

#[test]
fn contract_errors() {
    let cfg = small_config(7);
    let vt = model(ModelConfig {
        enabled_modalities: "vt".parse().unwrap(),
        ..cfg.clone()
    });
    let s = sample(&cfg, 3, 2, 5);
    assert!(matches!(vt.predict_with(&s, ModalitySet::VAT), Err(Error::Contract(_))));

    let full = model(cfg.clone());
    let mut no_text = s.clone();
    no_text.text = None;
    assert!(matches!(full.predict(&no_text), Err(Error::Contract(_))));
    assert!(full.predict_with(&no_text, "va".parse().unwrap()).is_ok());

    let narrow = ModelConfig { d_video: 5, ..cfg.clone() };
    assert!(matches!(model(narrow).predict(&s), Err(Error::Shape { .. })));

    let mut tape = Tape::new();
    let bound = full.params().bind(&mut tape, false);
    let v = Stream {
        modality: Modality::Video,
        x: tape.constant(3, cfg.d_model, vec![0.1; 3 * cfg.d_model]).unwrap(),
        mask: PaddingMask::all_valid(3),
    };
    let a = Stream {
        modality: Modality::Audio,
        x: tape.constant(2, cfg.d_model, vec![0.1; 2 * cfg.d_model]).unwrap(),
        mask: PaddingMask::all_valid(2),
    };
    assert!(matches!(
        full.interaction_forward(&mut tape, &bound, &v, Some(&a), None),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn disabled_modules_reroute_streams() {
    let cfg = small_config(8);
    let s = sample(&cfg, 4, 2, 6);
    let no_inter = model(ModelConfig { use_interaction: false, ..cfg.clone() });
    let mut tape = Tape::new();
    let bound = no_inter.params().bind(&mut tape, false);
    let tr = no_inter.trace(&mut tape, &bound, &s, ModalitySet::VAT).unwrap();
    assert!(tr.interaction.is_none());
    assert_eq!(tr.z_out, tr.fused[0].x);

    let no_fusion = model(ModelConfig { use_fusion: false, ..cfg });
    let mut tape = Tape::new();
    let bound = no_fusion.params().bind(&mut tape, false);
    let tr = no_fusion.trace(&mut tape, &bound, &s, ModalitySet::VAT).unwrap();
    let fused: Vec<Var> = tr.fused.iter().map(|s| s.x).collect();
    let augmented: Vec<Var> = tr.augmented.iter().map(|s| s.x).collect();
    assert_eq!(fused, augmented);
}

#[test]
fn checkpoint_params_must_match_exactly() {
    let cfg = small_config(9);
    let m = model(cfg.clone());
    let params: Vec<(String, Tensor)> = m.params().iter().map(|(n, t)| (n.to_owned(), t.clone())).collect();
    let back = CfsumModel::from_params(cfg.clone(), params.clone()).unwrap();
    assert!(back.params().bit_eq(m.params()));

    let missing = params[1..].to_vec();
    assert!(matches!(CfsumModel::from_params(cfg.clone(), missing), Err(Error::Data(_))));
    let mut extra = params.clone();
    extra.push(("bogus".into(), Tensor::scalar(0.0)));
    assert!(matches!(CfsumModel::from_params(cfg.clone(), extra), Err(Error::Data(_))));
    let mut reshaped = params;
    reshaped[0].1 = Tensor::scalar(0.0);
    assert!(matches!(CfsumModel::from_params(cfg, reshaped), Err(Error::Data(_))));
}
