use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dit_core::data::read_image;
use dit_core::train::checkpoint::Checkpoint;
use dit_core::train::metrics::read_metrics;

fn dit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dit")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--set", "hidden_size=32", "--set", "depth=1", "--set", "num_heads=2",
    "--set", "cond_dim=16", "--set", "time_embed_dim=16", "--set", "timesteps=20",
    "--set", "image_size=16",
];

fn gen(dir: &Path) {
    let out = dir.join("data");
    let o = dit(&["gen-data", "--seed", "7", "--train-n", "4", "--test-n", "2", "--size", "16", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let manifest = dir.join("data/train.manifest");
    let mut args: Vec<String> = vec!["train".into(), "--data".into(), manifest.to_str().unwrap().into()];
    args.extend(SMALL.iter().map(|s| s.to_string()));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    dit(&refs)
}

#[test]
fn gen_data_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let args = ["gen-data", "--seed", "7", "--train-n", "8", "--test-n", "2", "--size", "32", "--out", out.to_str().unwrap()];
    let o = dit(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed = String::from_utf8(o.stdout).unwrap();
    assert_eq!(printed.lines().count(), 2);
    let n = |sub: &str| fs::read_dir(out.join(sub)).unwrap().count();
    assert_eq!(n("train") + n("test"), 20);
    assert!(out.join("train.manifest").exists() && out.join("test.manifest").exists());
    assert!(out.join("resolved-config").exists());
    let first = fs::read(out.join("train/000003_tgt.ppm")).unwrap();
    assert_eq!(code(&dit(&args)), 0);
    assert_eq!(fs::read(out.join("train/000003_tgt.ppm")).unwrap(), first);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&dit(&["gen-data", "--seed", "7"])), 2);
    assert_eq!(code(&dit(&["frobnicate"])), 2);
    assert_eq!(code(&dit(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "lr = 0.1\nbogus_key = 3\n").unwrap();
    let o = dit(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bogus_key"));
}

#[test]
fn missing_manifest_exits_1_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--out", dir.path().join("run").to_str().unwrap(), "--iters", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.manifest"), "{}", stderr(&o));
}

#[test]
fn paper_preset_is_resolved() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = dit(&["train", "--data", "none", "--out", run.to_str().unwrap(), "--preset", "paper", "--dry-run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(run.join("resolved-config")).unwrap();
    for line in ["lr = 0.0001", "weight_decay = 0.0001", "batch_size = 64", "iterations = 40000", "depth = 28", "num_heads = 16"] {
        assert!(text.lines().any(|l| l == line), "missing '{line}' in\n{text}");
    }
}

#[test]
fn train_resume_sample_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let run = d.join("run");
    let o = train(d, &["--out", run.to_str().unwrap(), "--iters", "2", "--batch", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck_path = run.join("checkpoint.bin");
    assert_eq!(Checkpoint::load(&ck_path).unwrap().step, 2);
    assert_eq!(read_metrics(&run.join("metrics.csv")).unwrap().len(), 2);

    // resume to 4 steps
    let o = train(d, &["--out", run.to_str().unwrap(), "--iters", "4", "--batch", "2", "--resume", ck_path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(Checkpoint::load(&ck_path).unwrap().step, 4);
    let rows = read_metrics(&run.join("metrics.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);

    // the resolved config reproduces an uninterrupted run
    let again = d.join("again");
    let o = train(d, &["--out", again.to_str().unwrap(), "--config", run.join("resolved-config").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&ck_path).unwrap(), fs::read(again.join("checkpoint.bin")).unwrap());

    // changed model on resume
    let o = train(d, &["--out", run.to_str().unwrap(), "--iters", "6", "--resume", ck_path.to_str().unwrap(), "--set", "depth=2"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("depth"));

    let test = d.join("data/test.manifest");
    let eval = |out: &Path, extra: &[&str]| {
        let mut a = vec!["eval", "--checkpoint", ck_path.to_str().unwrap(), "--data", test.to_str().unwrap(), "--out", out.to_str().unwrap()];
        a.extend_from_slice(extra);
        dit(&a)
    };
    let e1 = d.join("e1");
    let o = eval(&e1, &["--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(e1.join("eval.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("MEAN,"));
    assert_eq!(read_image(&e1.join("grid.ppm")).unwrap().shape(), &[3, 34, 52]);
    let e2 = d.join("e2");
    assert_eq!(code(&eval(&e2, &["--seed", "3"])), 0);
    assert_eq!(fs::read(e1.join("eval.csv")).unwrap(), fs::read(e2.join("eval.csv")).unwrap());
    assert_eq!(fs::read(e1.join("grid.ppm")).unwrap(), fs::read(e2.join("grid.ppm")).unwrap());

    let e3 = d.join("e3");
    assert_eq!(code(&eval(&e3, &["--mode", "partial", "--t-start", "0"])), 2);
    assert_eq!(code(&eval(&e3, &["--mode", "partial", "--t-start", "20"])), 2);
    assert_eq!(code(&eval(&e3, &["--mode", "sideways"])), 2);
    let o = eval(&e3, &["--mode", "partial", "--t-start", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let grid = d.join("s/grid.ppm");
    fs::create_dir_all(grid.parent().unwrap()).unwrap();
    let o = dit(&["sample", "--checkpoint", ck_path.to_str().unwrap(), "--data", test.to_str().unwrap(), "--out", grid.to_str().unwrap(), "--count", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_image(&grid).unwrap().shape(), &[3, 16, 52]);

    let bad = d.join("bad.bin");
    fs::write(&bad, b"DITCKPT1\x01").unwrap();
    let o = dit(&["eval", "--checkpoint", bad.to_str().unwrap(), "--data", test.to_str().unwrap(), "--out", e3.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn tiny_ae_codec_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let codec = d.join("codec.bin");
    let o = dit(&[
        "pretrain-codec", "--data", d.join("data/train.manifest").to_str().unwrap(),
        "--out", codec.to_str().unwrap(), "--steps", "20",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = d.join("run");
    let o = train(d, &["--out", run.to_str().unwrap(), "--iters", "1", "--batch", "2", "--codec", "tiny-ae"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = train(d, &[
        "--out", run.to_str().unwrap(), "--iters", "1", "--batch", "2", "--codec", "tiny-ae",
        "--codec-file", codec.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = Checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.codec, Checkpoint::load(&codec).unwrap().codec);
}
