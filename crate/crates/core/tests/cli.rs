use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mau_core::data::{SequenceDataset, MSEQ_HEADER_LEN};
use mau_core::pgm::{decode_pgm, encode_pgm};

fn mau(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mau")).args(args).output().expect("run mau")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, size: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    let cfg = dir.join("small.txt");
    fs::write(&cfg, SMALL).unwrap();
    let o = mau(&[
        "gen-data", "--out", s(&out), "--num-seq", "4", "--frames", "8", "--size", size, "--seed", seed, "--config", s(&cfg),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

const SMALL: &str = "num_layers = 1\nhidden_channels = 2\ntau = 2\ncontext_len = 4\nhorizon_len = 4\n\
                     batch_size = 2\nmax_epochs = 10\nplot_interval = 2\ncheckpoint_interval = 2\n";

fn train_small(dir: &Path, data: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = dir.join("small.txt");
    let out_dir = dir.join("run");
    let mut args = vec!["train", "--data", s(data), "--config", s(&cfg), "--out-dir", s(&out_dir), "--max-iters", "3"];
    args.extend_from_slice(extra);
    (mau(&args), out_dir)
}

#[test]
fn gen_data_is_deterministic_and_reports_summary() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mseq");
    let b = dir.path().join("b.mseq");
    for p in [&a, &b] {
        let o = mau(&["gen-data", "--out", s(p), "--num-seq", "8", "--frames", "20", "--size", "16", "--seed", "7"]);
        assert!(o.status.success());
        assert_eq!(
            String::from_utf8(o.stdout).unwrap().trim(),
            format!("wrote 8 sequences (20 frames, 16x16) to {}", p.display())
        );
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = SequenceDataset::load(&a).unwrap();
    assert_eq!(ds.frames().shape(), &[8, 20, 1, 16, 16]);
    assert!(ds.frames().data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(MSEQ_HEADER_LEN, 4 + 8 * 4);
    assert_eq!(fs::metadata(&a).unwrap().len() as usize, MSEQ_HEADER_LEN + 4 * 8 * 20 * 16 * 16);
}

#[test]
fn invalid_flags_exit_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = mau(&["gen-data", "--out", s(&dir.path().join("x.mseq")), "--size", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    assert_eq!(mau(&["train", "--mode", "wgan"]).status.code(), Some(1));
    assert_eq!(mau(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = mau(&[
        "eval",
        "--data",
        s(&dir.path().join("none.mseq")),
        "--checkpoint",
        s(&dir.path().join("none.mauc")),
        "--metrics-out",
        s(&dir.path().join("m.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("none.mauc"));
}

#[test]
fn train_writes_logs_panels_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.mseq", "8", "1");
    let (o, run) = train_small(dir.path(), &data, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = String::from_utf8(o.stdout).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("iter=")).count(), 3);
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "iter,lr,eta,loss_gen,loss_disc");
    assert_eq!(rows.len(), 4);
    for name in ["config.txt", "final.mauc", "ckpt_000002.mauc"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let panel = run.join("panels/iter_000002");
    for k in 0..4 {
        for prefix in ["input", "gt", "gen", "att"] {
            assert!(panel.join(format!("{prefix}_{k:02}.pgm")).exists(), "{prefix}_{k:02}");
        }
    }
}

#[test]
fn non_finite_loss_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.mseq", "8", "1");
    let cfg = dir.path().join("boom.txt");
    fs::write(&cfg, format!("{SMALL}lr = 1e300\n")).unwrap();
    let o = mau(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("r")),
        "--max-iters",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_is_deterministic_and_checks_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.mseq", "8", "1");
    let (o, run) = train_small(dir.path(), &data, &[]);
    assert!(o.status.success());
    let ckpt = run.join("final.mauc");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let o = mau(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--metrics-out", s(p)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("ssim"));
    }
    let csv = fs::read_to_string(&a).unwrap();
    assert_eq!(csv, fs::read_to_string(&b).unwrap());
    assert_eq!(csv.lines().next().unwrap(), "frame_index,mse,mae,ssim,psnr");
    assert_eq!(csv.lines().count(), 1 + 4 * 4);

    let other = gen(dir.path(), "big.mseq", "16", "1");
    let o = mau(&["eval", "--data", s(&other), "--checkpoint", s(&ckpt), "--metrics-out", s(&dir.path().join("c.csv"))]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("16"));
    assert!(!dir.path().join("c.csv").exists());
}

#[test]
fn predict_dumps_context_and_both_horizons() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.mseq", "8", "2");
    let (o, run) = train_small(dir.path(), &data, &[]);
    assert!(o.status.success());
    let out = dir.path().join("frames");
    let ckpt = run.join("final.mauc");
    let o = mau(&["predict", "--checkpoint", s(&ckpt), "--input", s(&data), "--seq-index", "1", "--dump-frames", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 4 + 2 * 4);

    // Ground-truth dumps match the dataset through an independent reader.
    let ds = SequenceDataset::load(&data).unwrap();
    let bytes = fs::read(out.join("gt_00.pgm")).unwrap();
    let header = b"P5\n8 8\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let (seq, frames, context) = (1, 8, 4);
    let frame = &ds.frames().data()[(seq * frames + context) * 64..][..64];
    for (px, v) in bytes[header.len()..].iter().zip(frame) {
        assert!((*px as f64 / 255.0 - v).abs() <= 1.0 / 255.0);
    }

    let o = mau(&["predict", "--checkpoint", s(&ckpt), "--input", s(&data), "--seq-index", "9", "--dump-frames", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pgm_quantization_bound() {
    let values: Vec<f64> = (0..48).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let bytes = encode_pgm(&values, 8, 6).unwrap();
    let img = decode_pgm(&bytes).unwrap();
    assert_eq!((img.width, img.height), (8, 6));
    for (a, b) in img.values().iter().zip(&values) {
        assert!((a - b).abs() <= 1.0 / 255.0);
    }
    let zero = encode_pgm(&[0.0; 12], 4, 3).unwrap();
    assert!(zero[b"P5\n4 3\n255\n".len()..].iter().all(|&b| b == 0));
}

#[test]
fn resume_continues_csv_without_gap() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.mseq", "8", "3");
    let (o, run) = train_small(dir.path(), &data, &[]);
    assert!(o.status.success());
    let before = fs::read_to_string(run.join("loss.csv")).unwrap();
    let ckpt = run.join("ckpt_000002.mauc");
    let (o, _) = train_small(dir.path(), &data, &["--resume", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let after = fs::read_to_string(run.join("loss.csv")).unwrap();
    let iters: Vec<u64> = after.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(iters, vec![0, 1, 2]);
    assert_eq!(before, after);
}
