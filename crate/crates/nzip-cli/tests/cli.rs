//! End-to-end runs of the `nzip` binary: artifact round trips, stats
//! accounting, exit codes, and seed determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nzip::imageio::{load_image, save_image, Image};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nzip"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("failed to launch nzip")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout_line<'a>(out: &'a str, key: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no {key:?} line in output:\n{out}"))
        .trim()
}

/// Trains a deliberately tiny codec; a few milliseconds of work.
fn train_tiny(dir: &Path, seed: u64) -> PathBuf {
    let model = dir.join(format!("model_{seed}.nzwt"));
    let out = run(&[
        "train",
        "--set", "latent_channels=4",
        "--set", "hyper_channels=4",
        "--set", "feature_channels=4",
        "--set", "classes=2",
        "--set", "dataset_size=8",
        "--set", "recon_batch=4",
        "--set", "task_batch=4",
        "--set", "epochs=2",
        "--set", "image_size=16",
        "--seed", &seed.to_string(),
        "--model-out", model.to_str().unwrap(),
        "--quiet",
    ]);
    assert_ok(&out);
    model
}

fn test_image(path: &Path, w: usize, h: usize) {
    let mut pixels = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                pixels.push((((x * 10 + y * 13 + c * 77) % 256) as f64) / 255.0);
            }
        }
    }
    save_image(&Image::new(w, h, pixels).unwrap(), path).unwrap();
}

#[test]
fn compress_then_decompress_reproduces_the_image_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), 11);
    let src = dir.path().join("in.ppm");
    test_image(&src, 24, 17);

    let container = dir.path().join("out.nzip");
    let restored = dir.path().join("restored.png");
    assert_ok(&run(&[
        "compress",
        "--model", model.to_str().unwrap(),
        "--in", src.to_str().unwrap(),
        "--out", container.to_str().unwrap(),
    ]));
    assert_ok(&run(&[
        "decompress",
        "--model", model.to_str().unwrap(),
        "--in", container.to_str().unwrap(),
        "--out", restored.to_str().unwrap(),
    ]));
    let img = load_image(&restored).unwrap();
    assert_eq!((img.width, img.height), (24, 17));
}

#[test]
fn stats_bpp_matches_the_container_length_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), 12);
    let src = dir.path().join("in.ppm");
    test_image(&src, 30, 22);

    let container = dir.path().join("out.nzip");
    let out = run(&[
        "compress",
        "--model", model.to_str().unwrap(),
        "--in", src.to_str().unwrap(),
        "--out", container.to_str().unwrap(),
        "--stats",
    ]);
    assert_ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let bpp: f64 = stdout_line(&text, "bpp:").parse().unwrap();
    let bytes = std::fs::metadata(&container).unwrap().len() as f64;
    assert!((bpp - 8.0 * bytes / (30.0 * 22.0)).abs() < 1e-9, "bpp {bpp} off");
    let clamped: usize = stdout_line(&text, "clamped_elements:").parse().unwrap();
    assert_eq!(clamped, 0, "tiny untrained models should not clamp anything");
    let rate: f64 = stdout_line(&text, "estimated_rate_bits:").parse().unwrap();
    assert!(rate > 0.0);
}

#[test]
fn missing_model_file_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.ppm");
    test_image(&src, 16, 16);
    let out = run(&[
        "compress",
        "--model", dir.path().join("missing.nzwt").to_str().unwrap(),
        "--in", src.to_str().unwrap(),
        "--out", dir.path().join("x.nzip").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn unknown_flags_are_rejected() {
    let out = run(&["compress", "--frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn wrong_model_for_a_container_fails_with_a_digest_message() {
    let dir = tempfile::tempdir().unwrap();
    let model_a = train_tiny(dir.path(), 21);
    let model_b = train_tiny(dir.path(), 22);
    let src = dir.path().join("in.ppm");
    test_image(&src, 16, 16);
    let container = dir.path().join("a.nzip");
    assert_ok(&run(&[
        "compress",
        "--model", model_a.to_str().unwrap(),
        "--in", src.to_str().unwrap(),
        "--out", container.to_str().unwrap(),
    ]));
    let out = run(&[
        "decompress",
        "--model", model_b.to_str().unwrap(),
        "--in", container.to_str().unwrap(),
        "--out", dir.path().join("b.ppm").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest mismatch"));
}

#[test]
fn identical_seeds_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.ppm");
    test_image(&src, 32, 32);

    let mut containers = Vec::new();
    for run_dir in ["a", "b"] {
        let sub = dir.path().join(run_dir);
        std::fs::create_dir(&sub).unwrap();
        let model = sub.join("model.nzwt");
        let log = sub.join("log.csv");
        assert_ok(&run(&[
            "train",
            "--set", "latent_channels=4",
            "--set", "hyper_channels=4",
            "--set", "classes=2",
            "--set", "dataset_size=8",
            "--set", "recon_batch=4",
            "--set", "task_batch=4",
            "--set", "epochs=2",
            "--set", "image_size=16",
            "--set", "lambda_t=0.5",
            "--seed", "7",
            "--model-out", model.to_str().unwrap(),
            "--log-out", log.to_str().unwrap(),
            "--quiet",
        ]));
        let container = sub.join("img.nzip");
        assert_ok(&run(&[
            "compress",
            "--model", model.to_str().unwrap(),
            "--in", src.to_str().unwrap(),
            "--out", container.to_str().unwrap(),
        ]));
        containers.push((
            std::fs::read(&model).unwrap(),
            std::fs::read(&log).unwrap(),
            std::fs::read(&container).unwrap(),
        ));
    }
    assert_eq!(containers[0].0, containers[1].0, "model files differ");
    assert_eq!(containers[0].1, containers[1].1, "training logs differ");
    assert_eq!(containers[0].2, containers[1].2, "containers differ");
}

#[test]
fn latent_dump_agrees_between_image_and_container_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), 31);
    let src = dir.path().join("in.ppm");
    test_image(&src, 20, 20);
    let container = dir.path().join("img.nzip");
    let stats = run(&[
        "compress",
        "--model", model.to_str().unwrap(),
        "--in", src.to_str().unwrap(),
        "--out", container.to_str().unwrap(),
        "--stats",
    ]);
    assert_ok(&stats);
    let text = String::from_utf8(stats.stdout).unwrap();
    // the comparison below is only exact when nothing was window-clamped
    assert_eq!(stdout_line(&text, "clamped_elements:"), "0");

    let from_image = dir.path().join("img.csv");
    let from_container = dir.path().join("container.csv");
    assert_ok(&run(&[
        "latent",
        "--model", model.to_str().unwrap(),
        "--in", src.to_str().unwrap(),
        "--out", from_image.to_str().unwrap(),
    ]));
    assert_ok(&run(&[
        "latent",
        "--model", model.to_str().unwrap(),
        "--in", container.to_str().unwrap(),
        "--out", from_container.to_str().unwrap(),
    ]));
    let a = std::fs::read_to_string(&from_image).unwrap();
    let b = std::fs::read_to_string(&from_container).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with("tensor,c,y,x,value\n"));
    assert!(a.lines().count() > 1);
}

#[test]
fn eval_downstream_reports_an_accuracy_and_writes_the_head() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), 41);
    let head = dir.path().join("head.nzwt");
    let out = run(&[
        "eval-downstream",
        "--model", model.to_str().unwrap(),
        "--feature-channels", "4",
        "--classes", "2",
        "--dataset-size", "16",
        "--image-size", "16",
        "--epochs", "2",
        "--batch", "8",
        "--seed", "3",
        "--head-out", head.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let acc: f64 = stdout_line(&text, "holdout_accuracy:").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(head.is_file());

    let bad = run(&[
        "eval-downstream",
        "--model", model.to_str().unwrap(),
        "--stem", "resnet",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn rd_curve_emits_a_sorted_five_column_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("rd.csv");
    let out = run(&[
        "rd-curve",
        "--set", "latent_channels=4",
        "--set", "hyper_channels=4",
        "--set", "classes=2",
        "--set", "dataset_size=8",
        "--set", "recon_batch=4",
        "--set", "task_batch=4",
        "--set", "epochs=1",
        "--set", "image_size=16",
        "--lambdas", "1.0,0.1",
        "--eval-images", "2",
        "--out", csv_path.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("lambda_d,lambda_t,bpp,psnr,task_acc"));
    let mut lambdas = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 5, "bad row {line:?}");
        for col in &cols {
            col.parse::<f64>().unwrap();
        }
        lambdas.push(cols[0].parse::<f64>().unwrap());
    }
    assert_eq!(lambdas, vec![0.1, 1.0], "rows not sorted by lambda_d");
}

#[test]
fn rd_curve_rejects_malformed_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("rd.csv");
    // the = form keeps clap from reading the negative value as a flag
    for lambdas in ["--lambdas=abc", "--lambdas=", "--lambdas=-1.0"] {
        let out = run(&["rd-curve", lambdas, "--out", csv_path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(1), "sweep {lambdas:?} was accepted");
    }
}
