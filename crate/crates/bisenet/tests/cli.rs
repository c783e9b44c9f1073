//! End-to-end tests of the command-line binary: every subcommand, the
//! documented exit codes, and the on-disk artifacts.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bisenet::image_io::{read_pgm, write_ppm};
use bisenet::labels::{argmax_channels, label_to_gray};
use bisenet::tensor::io::read_tensor_f64;
use bisenet::tensor::Shape4;
use common::random_tensor;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bisenet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a toy run configuration and returns its path.
fn write_toy_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.txt");
    let body = format!(
        "classes = 3\nalpha = 0.25\nhead_width = 64\ninput_hw = 64x64\n\
         crop_hw = 64x64\nbatch = 2\nmax_iter = 4\nseed = 5\n{extra}"
    );
    fs::write(&path, body).unwrap();
    path
}

fn train_into(dir: &Path, cfg: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("run-{seed}"));
    let res = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--quiet",
    ]);
    assert_eq!(code(&res), 0, "train failed: {}", stderr(&res));
    out.join("checkpoint")
}

#[test]
fn analyze_writes_reports_and_grid_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(tmp.path(), "");
    let out = tmp.path().join("analysis");

    let res = run(&[
        "analyze",
        "--config",
        cfg.to_str().unwrap(),
        "--grid",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let csv = fs::read_to_string(out.join("cost_report.csv")).unwrap();
    assert!(csv.starts_with("layer,section,op,out_n,out_c,out_h,out_w,macs,flops,params"));
    assert!(out.join("cost_report.txt").exists());

    let tables = fs::read_to_string(out.join("tables.csv")).unwrap();
    assert!(tables.lines().any(|l| l.starts_with("aggregation,bga,") && l.contains("21.15")));
    let text = fs::read_to_string(out.join("tables.txt")).unwrap();
    assert!(text.contains("model") && text.contains("reference"));
}

#[test]
fn analyze_rejects_bad_flop_convention() {
    let res = run(&["analyze", "--flops-per-mac", "3", "--out", "/tmp/unused-analysis"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("--flops-per-mac"));
}

#[test]
fn train_writes_checkpoint_history_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(tmp.path(), "");
    let ckpt = train_into(tmp.path(), &cfg, 5);

    assert!(ckpt.join("manifest.txt").exists());
    assert!(ckpt.join("config.txt").exists());
    let run_dir = ckpt.parent().unwrap();
    let history = fs::read_to_string(run_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 5); // header + 4 iterations
    let eval = fs::read_to_string(run_dir.join("eval.txt")).unwrap();
    assert!(eval.starts_with("held_out_pixel_accuracy = "));

    // The stored config must not leak run-local paths.
    let stored = fs::read_to_string(ckpt.join("config.txt")).unwrap();
    assert!(stored.contains("checkpoint =\n") || stored.contains("checkpoint ="));
    assert!(!stored.contains("run-5"));
}

#[test]
fn same_seed_checkpoints_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(tmp.path(), "");
    let a = train_into(tmp.path(), &cfg, 9);
    let b_dir = tmp.path().join("second");
    fs::create_dir_all(&b_dir).unwrap();
    let b = train_into(&b_dir, &cfg, 9);

    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .flat_map(|e| {
            let e = e.unwrap();
            if e.path().is_dir() {
                fs::read_dir(e.path())
                    .unwrap()
                    .map(|f| {
                        let f = f.unwrap().path();
                        f.strip_prefix(&a).unwrap().to_str().unwrap().to_string()
                    })
                    .collect::<Vec<_>>()
            } else {
                vec![e.path().strip_prefix(&a).unwrap().to_str().unwrap().to_string()]
            }
        })
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n.starts_with("params/")));
    for name in names {
        let fa = fs::read(a.join(&name)).unwrap();
        let fb = fs::read(b.join(&name)).unwrap();
        assert_eq!(fa, fb, "checkpoint file {name} differs between same-seed runs");
    }
}

#[test]
fn infer_roundtrips_color_and_grayscale_images() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(tmp.path(), "");
    let ckpt = train_into(tmp.path(), &cfg, 5);

    // Color input at a non-network size: output must match input size.
    let image = random_tensor::<f32>(3, "img", Shape4::new(1, 3, 96, 160));
    let clamped = {
        let mut t = image.clone();
        for v in t.data_mut() {
            *v = v.abs().min(1.0);
        }
        t
    };
    let ppm = tmp.path().join("in.ppm");
    write_ppm(&ppm, &clamped).unwrap();
    let out_pgm = tmp.path().join("labels.pgm");
    let dump = tmp.path().join("logits.bt2");

    let res = run(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        ppm.to_str().unwrap(),
        "--output",
        out_pgm.to_str().unwrap(),
        "--dump-logits",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let (h, w, grays) = read_pgm(&out_pgm).unwrap();
    assert_eq!((h, w), (96, 160), "label map must match the input size");

    // The dumped logits, argmaxed and upsampled, must reproduce the map.
    let (_, logits) = read_tensor_f64(&dump).unwrap();
    let labels = argmax_channels(&logits).unwrap().resize_nearest(96, 160).unwrap();
    let expect: Vec<u8> = labels.data.iter().map(|&l| label_to_gray(l, 3)).collect();
    assert_eq!(grays, expect, "PGM content must equal argmaxed logits");

    // Grayscale input path.
    let pgm_in = tmp.path().join("in.pgm");
    let mut ascii = Vec::new();
    ascii.extend_from_slice(b"P5\n64 64\n255\n");
    ascii.extend((0..64usize * 64).map(|i| (i % 251) as u8));
    fs::write(&pgm_in, ascii).unwrap();
    let out2 = tmp.path().join("labels2.pgm");
    let res = run(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        pgm_in.to_str().unwrap(),
        "--output",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let (h2, w2, _) = read_pgm(&out2).unwrap();
    assert_eq!((h2, w2), (64, 64));
}

#[test]
fn infer_with_mismatched_architecture_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(tmp.path(), "");
    let ckpt = train_into(tmp.path(), &cfg, 5);

    let other = tmp.path().join("other.txt");
    fs::write(&other, "classes = 5\nalpha = 0.25\nhead_width = 64\ninput_hw = 64x64\n").unwrap();

    let image = tmp.path().join("in.pgm");
    fs::write(&image, {
        let mut v: Vec<u8> = b"P5\n64 64\n255\n".to_vec();
        v.extend(std::iter::repeat(128u8).take(64 * 64));
        v
    })
    .unwrap();

    let res = run(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        image.to_str().unwrap(),
        "--output",
        tmp.path().join("x.pgm").to_str().unwrap(),
        "--config",
        other.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 4, "expected checkpoint mismatch: {}", stderr(&res));
}

#[test]
fn infer_from_a_diverged_checkpoint_exits_3() {
    use bisenet::tensor::io::write_tensor;
    use bisenet::tensor::Tensor;

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(tmp.path(), "");
    let ckpt = train_into(tmp.path(), &cfg, 5);

    // Overwrite the final head convolution with infinities (same shape and
    // dtype); nothing downstream of it can launder the non-finite values.
    let victim = ckpt.join("params").join("head.main.logits.w.bt2");
    let (_, original) = read_tensor_f64(&victim).unwrap();
    write_tensor(&victim, &Tensor::<f32>::filled(original.shape(), f32::INFINITY)).unwrap();

    let image = tmp.path().join("in.pgm");
    fs::write(&image, {
        let mut v: Vec<u8> = b"P5\n64 64\n255\n".to_vec();
        v.extend(std::iter::repeat(100u8).take(64 * 64));
        v
    })
    .unwrap();

    let res = run(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        image.to_str().unwrap(),
        "--output",
        tmp.path().join("y.pgm").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 3, "expected numeric failure: {}", stderr(&res));
}

#[test]
fn golden_dump_and_compare_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(tmp.path(), "");
    let (d1, d2, d3) = (
        tmp.path().join("g1"),
        tmp.path().join("g2"),
        tmp.path().join("g3"),
    );

    for (dir, seed) in [(&d1, "5"), (&d2, "5"), (&d3, "6")] {
        let res = run(&[
            "dump-golden",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--taps",
            "logits.main,detail.s3.conv2.relu",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        assert!(dir.join("logits.main.bt2").exists());
        assert!(dir.join("detail.s3.conv2.relu.bt2").exists());
    }

    // Same seed: exactly zero difference.
    let a = d1.join("logits.main.bt2");
    let res = run(&["compare", a.to_str().unwrap(), d2.join("logits.main.bt2").to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(String::from_utf8_lossy(&res.stdout).contains("max abs diff 0.000e0"));

    // Different seed: beyond tolerance 0 -> exit 1.
    let res = run(&["compare", a.to_str().unwrap(), d3.join("logits.main.bt2").to_str().unwrap()]);
    assert_eq!(code(&res), 1);

    // Generous tolerance turns the same comparison into a pass.
    let res = run(&[
        "compare",
        a.to_str().unwrap(),
        d3.join("logits.main.bt2").to_str().unwrap(),
        "--tolerance",
        "1e9",
    ]);
    assert_eq!(code(&res), 0);
}

#[test]
fn single_and_double_precision_dumps_agree_on_toy_nets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(tmp.path(), "");
    let (d32, d64) = (tmp.path().join("s"), tmp.path().join("d"));

    for (dir, extra) in [(&d32, None), (&d64, Some("--f64"))] {
        let mut args = vec![
            "dump-golden",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "5",
            "--out",
            dir.to_str().unwrap(),
        ];
        args.extend(extra);
        let res = run(&args);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }

    let res = run(&[
        "compare",
        d32.join("logits.main.bt2").to_str().unwrap(),
        d64.join("logits.main.bt2").to_str().unwrap(),
        "--tolerance",
        "1e-5",
    ]);
    assert_eq!(code(&res), 0, "f32/f64 drift: {}", String::from_utf8_lossy(&res.stdout));
}

#[test]
fn unknown_tap_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(tmp.path(), "");
    let res = run(&[
        "dump-golden",
        "--config",
        cfg.to_str().unwrap(),
        "--taps",
        "no.such.node",
        "--out",
        tmp.path().join("g").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("unknown tap"));
}

#[test]
fn bad_config_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "classes = 3\nwibble = 4\n").unwrap();
    let res = run(&["analyze", "--config", bad.to_str().unwrap(), "--out", tmp.path().join("a").to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("unknown key"));
}

#[test]
fn invalid_thread_pin_exits_2() {
    let res = bin()
        .env("BISENET_THREADS", "zero")
        .args(["analyze", "--out", "/tmp/unused-analysis-2"])
        .output()
        .unwrap();
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("BISENET_THREADS"));
}

#[test]
fn thread_pin_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(tmp.path(), "");
    let (d1, d2) = (tmp.path().join("t1"), tmp.path().join("t4"));

    for (dir, threads) in [(&d1, "1"), (&d2, "4")] {
        let res = bin()
            .env("BISENET_THREADS", threads)
            .args([
                "dump-golden",
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                "5",
                "--out",
                dir.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }

    let res = run(&[
        "compare",
        d1.join("logits.main.bt2").to_str().unwrap(),
        d2.join("logits.main.bt2").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "thread count changed the forward pass");
}
