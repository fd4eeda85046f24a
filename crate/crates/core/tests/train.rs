use dit_core::codec::{CodecKind, LatentCodec};
use dit_core::data::{generate_pair, PairedSample};
use dit_core::model::{DiTConfig, DiTModel, ParamSet};
use dit_core::optim::{AdamW, AdamWConfig};
use dit_core::train::checkpoint::{param_set, Checkpoint};
use dit_core::train::metrics::{parse_metrics, read_metrics, HEADER};
use dit_core::train::{run, RunPaths, TrainConfig, Trainer};
use dit_core::{Error, Rng, Tensor};

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    for (k, v) in [
        ("image_size", "16"),
        ("hidden_size", "32"),
        ("depth", "1"),
        ("num_heads", "2"),
        ("cond_dim", "16"),
        ("time_embed_dim", "16"),
        ("batch_size", "4"),
        ("iterations", "2"),
        ("lr", "0.001"),
        ("seed", "5"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn pairs(n: u64, s: usize) -> Vec<PairedSample> {
    (0..n).map(|i| generate_pair(3, i, s).unwrap()).collect()
}

fn identity() -> LatentCodec {
    LatentCodec::identity(2).unwrap()
}

#[test]
fn config_text_round_trip() {
    for cfg in [TrainConfig::desk(), TrainConfig::paper(), small_config()] {
        let text = cfg.to_text();
        let back = TrainConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }
    assert_eq!(TrainConfig::desk().model.in_channels, 12);
    assert_eq!(TrainConfig::desk().model.input_size, 16);
}

#[test]
fn paper_preset_values() {
    let p = TrainConfig::paper();
    assert_eq!(p.iterations, 40_000);
    assert_eq!(p.batch_size, 64);
    assert_eq!(p.optim.lr, 1e-4);
    assert_eq!(p.optim.weight_decay, 1e-4);
    assert_eq!((p.model.depth, p.model.num_heads), (28, 16));
    p.validate().unwrap();
    let d = TrainConfig::desk();
    assert_eq!((d.iterations, d.batch_size), (2000, 16));
}

#[test]
fn config_text_errors() {
    let err = TrainConfig::from_text("lr = 0.1\nwarp = 9\n").unwrap_err();
    assert!(matches!(err, Error::Parse { offset: 9, .. }), "{err}");
    assert!(err.to_string().contains("warp"));
    assert!(TrainConfig::from_text("lr 0.1\n").is_err());
    assert!(TrainConfig::from_text("lr = 0.1\nlr = 0.2\n").is_err());
    assert!(TrainConfig::from_text("depth = two\n").is_err());
    let c = TrainConfig::from_text("# comment\n\ncodec = tiny-ae  # trailing\n").unwrap();
    assert_eq!(c.codec, CodecKind::TinyAe);
    assert_eq!(c.model.in_channels, 4);
    let mut bad = TrainConfig::desk();
    bad.iterations = 0;
    assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
}

/// Adam with decoupled decay, written out for one scalar.
fn reference_adamw(theta0: f64, grads: &[f64], c: &AdamWConfig) -> Vec<f64> {
    let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for (k, g) in grads.iter().enumerate() {
        let t = (k + 1) as i32;
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let mh = m / (1.0 - c.beta1.powi(t));
        let vh = v / (1.0 - c.beta2.powi(t));
        th -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * th);
        out.push(th);
    }
    out
}

fn scalar(v: f64) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.add("theta", Tensor::from_vec(vec![v]).with_requires_grad(true));
    ps
}

fn run_adamw(theta0: f64, grads: &[f64], c: AdamWConfig) -> Vec<f64> {
    let mut ps = scalar(theta0);
    let mut opt = AdamW::new(c, &ps);
    let id = ps.ids().next().unwrap();
    grads
        .iter()
        .map(|&g| {
            ps.clear_grads();
            ps.get_mut(id).accumulate_grad(&[g]).unwrap();
            opt.step(&mut ps).unwrap();
            ps.get(id).data()[0]
        })
        .collect()
}

#[test]
fn adamw_matches_reference_trajectory() {
    let grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 1.1, -0.2, 0.9, -3.0];
    let c = AdamWConfig {
        lr: 0.05,
        weight_decay: 0.01,
        ..AdamWConfig::default()
    };
    let a = run_adamw(0.8, &grads, c);
    let b = reference_adamw(0.8, &grads, &c);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
    let first = run_adamw(1.0, &[1.0], AdamWConfig { lr: 0.1, weight_decay: 0.0, ..c });
    assert!((first[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
}

#[test]
fn adamw_zero_gradient_cases() {
    let c = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    assert_eq!(run_adamw(0.5, &[0.0; 3], c), vec![0.5; 3]);
    let decayed = run_adamw(2.0, &[0.0], AdamWConfig { weight_decay: 0.5, ..c });
    assert!((decayed[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
}

#[test]
fn adamw_names_missing_gradient() {
    let mut ps = scalar(1.0);
    let mut opt = AdamW::new(AdamWConfig::default(), &ps);
    let err = opt.step(&mut ps).unwrap_err();
    assert!(matches!(err, Error::Contract(ref m) if m.contains("theta")));
}

#[test]
fn smoke_run_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::in_dir(dir.path());
    let data = pairs(8, 16);
    let mut t = Trainer::new(small_config(), identity()).unwrap();
    let rows = run(&mut t, &data, Some(&paths), |_| {}).unwrap();
    assert_eq!(rows.len(), 2);
    let text = std::fs::read_to_string(&paths.metrics).unwrap();
    assert!(text.starts_with(HEADER));
    assert!(!text.contains('\r'));
    let logged = parse_metrics(&text).unwrap();
    assert_eq!(logged.len(), 2);
    assert_eq!(logged.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2]);
    for (a, b) in logged.iter().zip(&rows) {
        assert_eq!(a.loss, b.loss);
    }
    let ck = Checkpoint::load(&paths.checkpoint).unwrap();
    assert_eq!(ck.step, 2);
    assert_eq!(ck.adam_step, 2);
}

#[test]
fn every_step_satisfies_the_loss_identity() {
    let data = pairs(8, 16);
    let mut t = Trainer::new(small_config(), identity()).unwrap();
    for _ in 0..2 {
        let br = t.train_step(&data).unwrap();
        assert!(br.identity_gap(&t.config().weights) < 1e-10);
    }
}

#[test]
fn first_step_eps_loss_is_near_one() {
    let mut cfg = TrainConfig::desk();
    cfg.batch_size = 32;
    let mut t = Trainer::new(cfg, identity()).unwrap();
    let br = t.train_step(&pairs(8, 32)).unwrap();
    assert!((br.eps_mse - 1.0).abs() < 0.1, "{}", br.eps_mse);
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let data = pairs(8, 16);
    let mut t = Trainer::new(small_config(), identity()).unwrap();
    t.train_step(&data).unwrap();
    let ck = t.checkpoint().unwrap();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);

    let restored = Trainer::from_checkpoint(&back, None).unwrap();
    for ((n1, a), (n2, b)) in restored.model().params().iter().zip(t.model().params().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(restored.optimizer(), t.optimizer());
    assert_eq!(restored.step(), 1);
    assert_eq!(restored.checkpoint().unwrap().to_bytes(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let t = Trainer::new(small_config(), identity()).unwrap();
    let bytes = t.checkpoint().unwrap().to_bytes();
    for cut in [0, 5, 8, 13, 40, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
    let mut newer = bytes.clone();
    newer[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&newer), Err(Error::Version(_))));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Parse { .. })));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.bin");
    std::fs::write(&p, &long[..20]).unwrap();
    let err = Checkpoint::load(&p).unwrap_err();
    assert!(matches!(err.root(), Error::Parse { .. }));
    assert!(err.to_string().contains("ck.bin"));
}

#[test]
fn loading_into_a_different_model_names_the_parameter() {
    let t = Trainer::new(small_config(), identity()).unwrap();
    let ck = t.checkpoint().unwrap();
    let cfg = DiTConfig {
        hidden_size: 16,
        ..small_config().model
    };
    let mut other = DiTModel::new(cfg, 0).unwrap();
    let err = other.params_mut().load_from(&param_set(&ck.model)).unwrap_err();
    assert!(matches!(err, Error::Dimension(ref m) if m.contains("patch_proj.w")), "{err}");
}

#[test]
fn resume_rejects_changed_configuration() {
    let t = Trainer::new(small_config(), identity()).unwrap();
    let ck = t.checkpoint().unwrap();
    let mut cfg = small_config();
    cfg.set("hidden_size", "64").unwrap();
    cfg.set("lr", "0.5").unwrap();
    let err = Trainer::from_checkpoint(&ck, Some(&cfg)).err().unwrap();
    assert!(matches!(err, Error::Version(ref m) if m.contains("hidden_size") && m.contains("lr")), "{err}");
    let mut longer = small_config();
    longer.iterations = 10;
    let r = Trainer::from_checkpoint(&ck, Some(&longer)).unwrap();
    assert_eq!(r.config().iterations, 10);
}

#[test]
fn resume_reproduces_the_uninterrupted_trace() {
    let data = pairs(8, 16);
    let mut cfg = small_config();
    cfg.iterations = 13;
    cfg.checkpoint_every = 3;

    let full_dir = tempfile::tempdir().unwrap();
    let full_paths = RunPaths::in_dir(full_dir.path());
    let mut full = Trainer::new(cfg.clone(), identity()).unwrap();
    let full_rows = run(&mut full, &data, Some(&full_paths), |_| {}).unwrap();

    // stop after 3 steps, then resume from the file
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::in_dir(dir.path());
    let mut first = cfg.clone();
    first.iterations = 3;
    let mut a = Trainer::new(first, identity()).unwrap();
    run(&mut a, &data, Some(&paths), |_| {}).unwrap();
    drop(a);
    let ck = Checkpoint::load(&paths.checkpoint).unwrap();
    assert_eq!(ck.step, 3);
    let mut b = Trainer::from_checkpoint(&ck, Some(&cfg)).unwrap();
    let rest = run(&mut b, &data, Some(&paths), |_| {}).unwrap();
    assert_eq!(rest.len(), 10);
    for (x, y) in rest.iter().zip(&full_rows[3..]) {
        assert_eq!(x.step, y.step);
        assert_eq!(x.loss, y.loss);
    }
    assert_eq!(
        std::fs::read(&paths.checkpoint).unwrap(),
        std::fs::read(&full_paths.checkpoint).unwrap()
    );
    let logged = read_metrics(&paths.metrics).unwrap();
    assert_eq!(logged.len(), 13);
    let reference = read_metrics(&full_paths.metrics).unwrap();
    for (x, y) in logged.iter().zip(&reference) {
        assert_eq!((x.step, x.loss), (y.step, y.loss));
    }
}

#[test]
fn codec_must_match_configuration() {
    let mut cfg = small_config();
    cfg.set("codec", "tiny-ae").unwrap();
    assert!(Trainer::new(cfg.clone(), identity()).is_err());
    let ae = LatentCodec::tiny_ae(2, 4, &mut Rng::new(1)).unwrap();
    let snapshot = ae.params().clone();
    let mut t = Trainer::new(cfg, ae).unwrap();
    t.train_step(&pairs(4, 16)).unwrap();
    assert_eq!(t.codec().params(), &snapshot);
    let back = Trainer::from_checkpoint(&t.checkpoint().unwrap(), None).unwrap();
    assert_eq!(back.codec().params(), &snapshot);
}

#[test]
fn wrong_image_size_is_rejected() {
    let mut t = Trainer::new(small_config(), identity()).unwrap();
    assert!(matches!(t.train_step(&pairs(2, 32)), Err(Error::Dimension(_))));
    assert!(matches!(t.train_step(&[]), Err(Error::Parameter(_))));
}
