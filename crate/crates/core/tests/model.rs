use dit_core::model::embed::{patchify_tensor, unpatchify_tensor};
use dit_core::model::{forward_streamed, DiTConfig, DiTModel, ModelPreset};
use dit_core::tensor::gradcheck::{check_sampled, DEFAULT_STEP};
use dit_core::{Error, Rng, Tape, Tensor};

fn inputs(cfg: &DiTConfig, b: usize, seed: u64) -> (Tensor, Vec<usize>, Tensor) {
    let mut rng = Rng::new(seed);
    let z = Tensor::randn(&mut rng, &[b, cfg.in_channels, cfg.input_size, cfg.input_size]);
    let ts = (0..b).map(|_| rng.below(200)).collect();
    let cond = Tensor::randn(&mut rng, &[b, cfg.cond_dim]);
    (z, ts, cond)
}

/// Give every zero-initialized modulation/projection parameter random values.
fn open_gates(model: &mut DiTModel, seed: u64, amp: f64) {
    let mut rng = Rng::new(seed);
    for id in model.zero_init_params() {
        let t = model.params_mut().get_mut(id);
        t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-amp, amp));
    }
}

#[test]
fn untrained_model_predicts_exact_zero() {
    let cfg = DiTConfig { in_channels: 12, ..DiTConfig::desk() };
    let model = DiTModel::new(cfg.clone(), 0).unwrap();
    let (z, ts, cond) = inputs(&cfg, 3, 1);
    let out = model.predict(&z, &ts, &cond).unwrap();
    assert_eq!(out.shape(), z.shape());
    assert!(out.data().iter().all(|&v| v == 0.0));
    for id in model.zero_init_params() {
        assert!(model.params().get(id).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn shape_contract_over_config_sweep() {
    for p in [2, 4] {
        for d in [32, 64] {
            for depth in [1, 2] {
                let cfg = DiTConfig {
                    input_size: 8,
                    in_channels: 3,
                    patch_size: p,
                    hidden_size: d,
                    depth,
                    num_heads: 4,
                    cond_dim: 16,
                    time_embed_dim: 16,
                };
                assert_eq!(cfg.num_tokens(), 8 * 8 / (p * p));
                let mut model = DiTModel::new(cfg.clone(), 2).unwrap();
                open_gates(&mut model, 3, 0.1);
                let (z, ts, cond) = inputs(&cfg, 2, 4);
                let tok = patchify_tensor(&z, p).unwrap();
                assert_eq!(tok.shape(), &[2, cfg.num_tokens(), 3 * p * p]);
                assert_eq!(unpatchify_tensor(&tok, p, 8, 8).unwrap(), z);
                let out = model.predict(&z, &ts, &cond).unwrap();
                assert_eq!(out.shape(), z.shape());
                assert!(out.is_finite());
                assert_eq!(cfg.parameter_count(), model.params().num_scalars());
            }
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_heads = DiTConfig { num_heads: 3, ..DiTConfig::desk() };
    assert!(matches!(DiTModel::new(bad_heads, 0), Err(Error::Parameter(_))));
    let bad_patch = DiTConfig { patch_size: 3, ..DiTConfig::desk() };
    assert!(matches!(bad_patch.validate(), Err(Error::Parameter(_))));
    let printed = DiTConfig {
        hidden_size: ModelPreset::dit_xl_256().printed_hidden_size,
        ..ModelPreset::dit_xl_256().config
    };
    assert!(printed.validate().is_err());
}

#[test]
fn wrong_latent_shape_is_dimension_error() {
    let cfg = DiTConfig::tiny();
    let model = DiTModel::new(cfg.clone(), 0).unwrap();
    let (_, ts, cond) = inputs(&cfg, 2, 1);
    let z = Tensor::zeros(&[2, cfg.in_channels + 1, cfg.input_size, cfg.input_size]);
    let err = model.predict(&z, &ts, &cond).unwrap_err();
    assert!(matches!(err.root(), Error::Dimension(_)));
}

fn conditioning(model: &DiTModel, ts: &[usize], cond: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let c = tape.constant(cond.clone());
    let (c, kv) = model.conditioning(&mut tape, &bound, ts, c).unwrap();
    (tape.value(c).clone(), tape.value(kv).clone())
}

#[test]
fn conditioning_decomposes_additively() {
    let cfg = DiTConfig::tiny();
    let mut model = DiTModel::new(cfg.clone(), 5).unwrap();
    // non-zero biases everywhere so the affine part is exercised
    let mut rng = Rng::new(9);
    for t in model.params_mut().tensors_mut() {
        if t.rank() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-0.3, 0.3));
        }
    }
    let ts = [3, 150];
    let a = Tensor::randn(&mut rng, &[2, cfg.cond_dim]);
    let b = Tensor::randn(&mut rng, &[2, cfg.cond_dim]);
    let zero = Tensor::zeros(&[2, cfg.cond_dim]);
    let (ca, _) = conditioning(&model, &ts, &a);
    let (cb, _) = conditioning(&model, &ts, &b);
    let (cab, _) = conditioning(&model, &ts, &a.add(&b).unwrap());
    let (c0, kv0) = conditioning(&model, &ts, &zero);
    let resid = cab.sub(&ca).unwrap().sub(&cb).unwrap().add(&c0).unwrap();
    assert!(resid.data().iter().all(|v| v.abs() < 1e-12));

    // zero condition: c is the timestep pathway plus the constant cond bias
    let cond_bias = model.params().find("cond_proj.b").unwrap();
    let bias = model.params().get(cond_bias).clone();
    for row in kv0.data().chunks(cfg.hidden_size) {
        assert_eq!(row, bias.data());
    }

    // silence the timestep pathway: c is cond_proj(cond) alone
    for name in ["time_mlp.1.w", "time_mlp.1.b"] {
        let id = model.params().find(name).unwrap();
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let (c, kv) = conditioning(&model, &ts, &a);
    assert_eq!(c.data(), kv.data());
}

#[test]
fn cross_attention_token_is_cond_projection_without_time() {
    let cfg = DiTConfig::tiny();
    let model = DiTModel::new(cfg.clone(), 6).unwrap();
    let cond = Tensor::randn(&mut Rng::new(2), &[1, cfg.cond_dim]);
    let (_, kv_a) = conditioning(&model, &[0], &cond);
    let (_, kv_b) = conditioning(&model, &[199], &cond);
    assert_eq!(kv_a, kv_b);
}

#[test]
fn forward_is_deterministic_and_condition_sensitive() {
    let cfg = DiTConfig::tiny();
    let mut m1 = DiTModel::new(cfg.clone(), 7).unwrap();
    let mut m2 = DiTModel::new(cfg.clone(), 7).unwrap();
    open_gates(&mut m1, 8, 0.5);
    open_gates(&mut m2, 8, 0.5);
    assert_eq!(m1.params(), m2.params());
    let (z, ts, cond) = inputs(&cfg, 2, 9);
    let a = m1.predict(&z, &ts, &cond).unwrap();
    let b = m2.predict(&z, &ts, &cond).unwrap();
    assert_eq!(a.data(), b.data());
    let other = cond.map(|v| -v);
    let c = m1.predict(&z, &ts, &other).unwrap();
    assert!(a.max_abs_diff(&c).unwrap() > 1e-6);
    assert_ne!(DiTModel::new(cfg, 8).unwrap().params(), m1.params());
}

#[test]
fn streamed_forward_matches_resident_model() {
    let cfg = DiTConfig { depth: 3, ..DiTConfig::tiny() };
    // open the gates by name so both constructions see the same values
    let adjust = |name: &str, t: &mut Tensor| {
        if name.contains("ada") || name.starts_with("final.") {
            let mut rng = Rng::new(1).split(name);
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5));
        }
    };
    let mut model = DiTModel::new(cfg.clone(), 11).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        adjust(&name, model.params_mut().get_mut(id));
    }
    let (z, ts, cond) = inputs(&cfg, 2, 12);
    let resident = model.predict(&z, &ts, &cond).unwrap();
    assert!(resident.data().iter().any(|&v| v != 0.0));
    let streamed = forward_streamed(&cfg, 11, &z, &ts, &cond, adjust).unwrap();
    assert_eq!(resident.data(), streamed.data());
}

#[test]
fn paper_preset_parameter_count_is_analytic() {
    let preset = ModelPreset::dit_xl_256();
    assert_eq!(preset.config.depth, 28);
    assert_eq!(preset.config.num_heads, 16);
    assert_eq!(preset.printed_hidden_size, 1156);
    assert!(preset.note.is_some());
    preset.config.validate().unwrap();
    let d = 1152usize;
    let per_block = 9 * d * d + 9 * d + 8 * (d * d + d) + 4 * d * d + 4 * d + 4 * d * d + d;
    assert_eq!(
        preset.config.parameter_count(),
        16 * d + d + 256 * d + d + d * d + d + 768 * d + d + 28 * per_block + 2 * d * d + 2 * d + d * 16 + 16
    );
}

#[test]
fn sampled_parameter_gradients_match_finite_differences() {
    let cfg = DiTConfig::tiny();
    let mut model = DiTModel::new(cfg.clone(), 13).unwrap();
    open_gates(&mut model, 14, 0.5);
    let (z, ts, cond) = inputs(&cfg, 2, 15);
    let params: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let n = params.len();

    // 1% of scalars, at least 40, spread over all tensors
    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut rng = Rng::new(16);
    let k = (total / 100).max(40);
    let sample: Vec<(usize, usize)> = (0..k)
        .map(|_| {
            let i = rng.below(n);
            (i, rng.below(params[i].numel()))
        })
        .collect();

    let err = check_sampled(
        |tape, v| {
            let bound = dit_core::model::Bound(v.to_vec());
            let zv = tape.constant(z.clone());
            let cv = tape.constant(cond.clone());
            let out = model.forward(tape, &bound, zv, &ts, cv)?;
            let sq = tape.square(out);
            Ok(tape.mean(sq))
        },
        &params,
        &sample,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "rel err {err}");
}
