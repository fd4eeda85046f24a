use dit_core::codec::LatentCodec;
use dit_core::data::{decode_ppm, generate_pair, PairedSample};
use dit_core::model::{Bound, DiTConfig, DiTModel, NoisePredictor};
use dit_core::sample::*;
use dit_core::schedule::{NoiseSchedule, ScheduleConfig};
use dit_core::semantic::SemanticEncoder;
use dit_core::{Error, Result, Rng, Tape, Tensor, Var};

/// Knows the clean latent of every batch element and returns the exact noise.
struct Oracle<'a> {
    x0: Tensor,
    sched: &'a NoiseSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn bind(&self, _tape: &mut Tape) -> Bound {
        Bound(Vec::new())
    }

    fn predict_eps(&self, tape: &mut Tape, _b: &Bound, z: Var, ts: &[usize], _c: Var) -> Result<Var> {
        let zt = tape.value(z).clone();
        let per = zt.numel() / ts.len();
        let mut out = Vec::with_capacity(zt.numel());
        for (i, &t) in ts.iter().enumerate() {
            let (a, b) = (self.sched.sqrt_alpha_bar[t], self.sched.sqrt_one_minus_alpha_bar[t]);
            let zi = &zt.data()[i * per..(i + 1) * per];
            let xi = &self.x0.data()[i * per..(i + 1) * per];
            out.extend(zi.iter().zip(xi).map(|(z, x)| (z - a * x) / b));
        }
        Ok(tape.constant(Tensor::new(zt.shape(), out)?))
    }
}

struct Parts {
    codec: LatentCodec,
    enc: SemanticEncoder,
    sched: NoiseSchedule,
}

fn parts(cond_dim: usize) -> Parts {
    Parts {
        codec: LatentCodec::identity(2).unwrap(),
        enc: SemanticEncoder::new(cond_dim).unwrap(),
        sched: ScheduleConfig::desk().build().unwrap(),
    }
}

fn batch_of(pairs: &[PairedSample], f: impl Fn(&PairedSample) -> Tensor) -> Tensor {
    Tensor::stack(&pairs.iter().map(f).collect::<Vec<_>>()).unwrap()
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[test]
fn oracle_full_chain_recovers_the_target() {
    let p = parts(64);
    let pairs: Vec<_> = (0..2).map(|i| generate_pair(1, i, 32).unwrap()).collect();
    let tgt = batch_of(&pairs, |q| q.target.clone());
    let src = batch_of(&pairs, |q| q.source.clone());
    let oracle = Oracle {
        x0: p.codec.encode_batch(&tgt).unwrap(),
        sched: &p.sched,
    };
    let s = Sampler {
        model: &oracle,
        codec: &p.codec,
        encoder: &p.enc,
        schedule: &p.sched,
    };
    let out = s.generate(&src, &src, SampleMode::Full, &[0, 1], 9).unwrap();
    assert!(max_abs(&out, &tgt) < 0.05);
}

#[test]
fn oracle_short_chain_is_near_identity() {
    let p = parts(64);
    let src = generate_pair(2, 0, 32).unwrap().source;
    let oracle = Oracle {
        x0: p.codec.encode(&src).unwrap().reshape(&[1, 12, 16, 16]).unwrap(),
        sched: &p.sched,
    };
    let s = Sampler {
        model: &oracle,
        codec: &p.codec,
        encoder: &p.enc,
        schedule: &p.sched,
    };
    let out = s.sample_partial(&src, 1, &Rng::new(3)).unwrap();
    let round = p.codec.decode(&p.codec.encode(&src).unwrap()).unwrap();
    assert!(max_abs(&out, &round) < 0.05);
}

#[test]
fn initial_noise_energy_grows_with_t_start() {
    let p = parts(64);
    let cfg = DiTConfig { in_channels: 12, ..DiTConfig::desk() };
    let model = DiTModel::new(cfg, 0).unwrap();
    let s = Sampler {
        model: &model,
        codec: &p.codec,
        encoder: &p.enc,
        schedule: &p.sched,
    };
    let src = generate_pair(4, 0, 32).unwrap().source;
    let z0 = p.codec.encode(&src).unwrap();
    let b = src.reshape(&[1, 3, 32, 32]).unwrap();
    let mut last = 0.0;
    for t_start in [1, 10, 50, 100, 150, 199] {
        let mut energy = 0.0;
        for k in 0..100 {
            let z = s
                .initial_latents(&b, SampleMode::Partial { t_start }, &[sample_rng(5, k)])
                .unwrap();
            energy += z[0].sub(&z0).unwrap().map(|v| v * v).sum();
        }
        energy /= 100.0;
        assert!(energy >= last, "t_start {t_start}: {energy} < {last}");
        last = energy;
    }
}

#[test]
fn untrained_sampling_is_deterministic_and_in_range() {
    let p = parts(64);
    let cfg = DiTConfig { in_channels: 12, ..DiTConfig::desk() };
    let model = DiTModel::new(cfg, 0).unwrap();
    let s = Sampler {
        model: &model,
        codec: &p.codec,
        encoder: &p.enc,
        schedule: &p.sched,
    };
    let src = generate_pair(6, 0, 32).unwrap().source;
    let a = s.sample_full(&src, &Rng::new(7)).unwrap();
    let b = s.sample_full(&src, &Rng::new(7)).unwrap();
    assert_eq!(a.shape(), &[3, 32, 32]);
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let c = s.sample_partial(&src, 150, &Rng::new(7)).unwrap();
    assert_eq!(c, s.sample_partial(&src, 150, &Rng::new(7)).unwrap());
    assert_ne!(a, s.sample_full(&src, &Rng::new(8)).unwrap());
}

#[test]
fn t_start_range_is_enforced() {
    let p = parts(64);
    let model = DiTModel::new(DiTConfig { in_channels: 12, ..DiTConfig::desk() }, 0).unwrap();
    let s = Sampler {
        model: &model,
        codec: &p.codec,
        encoder: &p.enc,
        schedule: &p.sched,
    };
    let src = generate_pair(6, 0, 32).unwrap().source;
    for t in [0, 200, 500] {
        assert!(matches!(s.sample_partial(&src, t, &Rng::new(1)), Err(Error::Parameter(_))));
    }
    assert_eq!(SampleMode::partial_default(200), SampleMode::Partial { t_start: 150 });
    let wrong = generate_pair(6, 0, 16).unwrap().source;
    assert!(s.sample_full(&wrong, &Rng::new(1)).is_err());
}

#[test]
fn psnr_conventions() {
    let mut rng = Rng::new(1);
    let a = Tensor::rand_uniform(&mut rng, &[3, 4, 4]);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    assert_eq!(mean_abs_error(&a, &a).unwrap(), 0.0);
    let gray = Tensor::zeros(&[3, 4, 4]);
    let checker = Tensor::new(
        &[3, 4, 4],
        (0..48).map(|i| if (i + i / 4) % 2 == 0 { 1.0 } else { -1.0 }).collect(),
    )
    .unwrap();
    assert!((psnr(&gray, &checker).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-12);
}

#[test]
fn metrics_match_scalar_reimplementation() {
    let mut rng = Rng::new(2);
    for _ in 0..5 {
        let a = Tensor::randn(&mut rng, &[3, 8, 8]);
        let b = Tensor::randn(&mut rng, &[3, 8, 8]);
        let n = a.numel() as f64;
        let mut se = 0.0;
        let mut ae = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            se += (x - y) * (x - y);
            ae += (x - y).abs();
        }
        let want = 10.0 * (4.0 / (se / n)).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-10);
        assert!((mean_abs_error(&a, &b).unwrap() - ae / n).abs() < 1e-10);
    }
}

#[test]
fn evaluation_report_and_csv() {
    let p = parts(64);
    let pairs: Vec<_> = (10..12).map(|i| generate_pair(3, i, 32).unwrap()).collect();
    let tgt = batch_of(&pairs, |q| q.target.clone());
    let oracle = Oracle {
        x0: p.codec.encode_batch(&tgt).unwrap(),
        sched: &p.sched,
    };
    let s = Sampler {
        model: &oracle,
        codec: &p.codec,
        encoder: &p.enc,
        schedule: &p.sched,
    };
    let (report, outputs) = evaluate(&s, &pairs, SampleMode::Full, 1).unwrap();
    assert_eq!(report.count(), 2);
    assert_eq!(outputs.len(), 2);
    let mean = (report.rows[0].psnr_db + report.rows[1].psnr_db) / 2.0;
    assert!((report.mean_psnr_db - mean).abs() < 1e-10);
    assert!(report.rows.iter().all(|r| r.psnr_db > 30.0 && r.cos_tgt > 0.99));
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sample_id,psnr_db,l1,cos_src,cos_tgt");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("10,"));
    assert!(lines[3].starts_with("MEAN,"));
    assert!(matches!(evaluate(&s, &[], SampleMode::Full, 1), Err(Error::Parameter(_))));

    let exact = score(&p.enc, &pairs[0], &pairs[0].target).unwrap();
    assert_eq!(exact.psnr_db, PSNR_CAP_DB);
    assert_eq!(exact.l1, 0.0);
    assert!((exact.cos_tgt - 1.0).abs() < 1e-12);
}

#[test]
fn grid_layout() {
    let p = generate_pair(1, 0, 32).unwrap();
    let row = (p.source.clone(), p.target.scale(0.5), p.target.clone());
    let g = grid(&[row.clone()]).unwrap();
    assert_eq!(g.shape(), &[3, 32, 100]);
    let g2 = grid(&[row.clone(), row.clone()]).unwrap();
    assert_eq!(g2.shape(), &[3, 66, 100]);
    // separator columns and rows are white
    assert!((0..66).all(|y| g2.data()[y * 100 + 32] == 1.0 && g2.data()[y * 100 + 33] == 1.0));
    assert!((0..100).all(|x| g2.data()[32 * 100 + x] == 1.0));
    assert_eq!(g.data()[34], row.1.data()[0]);

    assert!(matches!(grid(&[]), Err(Error::Parameter(_))));
    let small = generate_pair(1, 0, 16).unwrap().source;
    assert!(matches!(grid(&[(small, row.1.clone(), row.2.clone())]), Err(Error::Dimension(_))));

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    emit_grid(&[row.clone()], &a).unwrap();
    emit_grid(&[row], &b).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(decode_ppm(&bytes).unwrap().shape(), &[3, 32, 100]);
}
