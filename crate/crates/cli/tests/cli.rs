use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn glowin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glowin"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn glowin")
}

fn ok(args: &[&str]) -> String {
    let out = glowin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&[
            "gen-data",
            "--out",
            p(dir),
            "--count",
            "12",
            "--size",
            "16",
            "--seed",
            "3",
        ]);
    }
    let files = read_dir_sorted(&a);
    assert_eq!(files.len(), 14);
    assert_eq!(files, read_dir_sorted(&b));
}

#[test]
fn train_on_missing_data_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no_such_corpus");
    let out = glowin(&["train", "--data", p(&missing), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no_such_corpus"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(glowin(&["train"]).status.code(), Some(1));
    assert_eq!(glowin(&["frobnicate"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let out = glowin(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(tmp.path()),
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_flags_with_defaults() {
    let help = ok(&["sample", "--help"]);
    assert!(help.contains("--temperature") && help.contains("0.7"), "{help}");
    let help = ok(&["train", "--help"]);
    for flag in ["--config", "--learning-rate", "--batch-size", "--sigma-ab", "--resume"] {
        assert!(help.contains(flag), "{flag} missing");
    }
    assert!(help.contains("1e-4") && help.contains("0.85"));
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    ok(&[
        "gen-data",
        "--out",
        p(&data),
        "--count",
        "48",
        "--size",
        "16",
        "--seed",
        "1",
    ]);

    let cfg = root.join("train.toml");
    fs::write(
        &cfg,
        "learning_rate = 1e-3\nbatch_size = 4\nlevels = 2\nsteps = 2\nhidden_width = 8\n\
         factor_widths = [3, 4, 1]\nmax_steps = 50\nholdout_fraction = 0.2\nholdout_max = 8\n\
         slice_bins = 3\nseed = 2\n",
    )
    .unwrap();
    let run = root.join("run");
    // The flag wins over the file.
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--max-steps",
        "4",
    ]);
    let ckpt = run.join("model.glwn");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(metrics.starts_with("step,"));

    let again = root.join("again");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&again),
        "--max-steps",
        "4",
    ]);
    assert_eq!(metrics, fs::read_to_string(again.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join("model.glwn")).unwrap());

    // Resume two more steps into the first run directory.
    ok(&[
        "train",
        "--resume",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--max-steps",
        "6",
    ]);
    let resumed = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(resumed.lines().count(), 7);
    assert!(resumed.starts_with(&metrics));

    let bpd = ok(&["eval-bpd", "--ckpt", p(&ckpt), "--data", p(&data)]);
    let value: f64 = bpd.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(value.is_finite() && value > 0.0, "{bpd}");

    let samples = root.join("samples");
    ok(&[
        "sample",
        "--ckpt",
        p(&ckpt),
        "--n",
        "3",
        "--seed",
        "4",
        "--out",
        p(&samples),
    ]);
    assert_eq!(fs::read_dir(&samples).unwrap().count(), 3);

    let a = data.join("img_00000.pgm");
    let b = data.join("img_00001.pgm");
    for factor in ["anomaly", "all"] {
        let out = root.join(format!("interp_{factor}"));
        ok(&[
            "interpolate",
            "--ckpt",
            p(&ckpt),
            "--a",
            p(&a),
            "--b",
            p(&b),
            "--factor",
            factor,
            "--steps",
            "5",
            "--out",
            p(&out),
        ]);
        assert_eq!(fs::read_dir(&out).unwrap().count(), 5);
    }
    let bad = glowin(&[
        "interpolate",
        "--ckpt",
        p(&ckpt),
        "--a",
        p(&a),
        "--b",
        p(&b),
        "--factor",
        "nose",
        "--out",
        p(root),
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let latents = root.join("anomaly.csv");
    ok(&[
        "export-latents",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--which",
        "anomaly",
        "--out",
        p(&latents),
    ]);
    let table = fs::read_to_string(&latents).unwrap();
    assert_eq!(table.lines().count(), 49);
    // 3 of 8 channels of a 8×4×4 final latent.
    assert_eq!(table.lines().next().unwrap().split(',').count(), 3 + 48);

    let report = root.join("report.csv");
    ok(&[
        "probe",
        "--latents",
        p(&latents),
        "--task",
        "cls",
        "--out",
        p(&report),
        "--seeds",
        "0,1",
    ]);
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 5);
    let reg = root.join("reg.csv");
    ok(&[
        "probe",
        "--latents",
        p(&latents),
        "--task",
        "reg",
        "--out",
        p(&reg),
        "--seeds",
        "0",
        "--epochs",
        "5",
    ]);
    assert!(
        glowin(&["probe", "--latents", p(&latents), "--task", "cluster", "--out", p(&reg)])
            .status
            .code()
            == Some(1)
    );

    let sweep = root.join("sweep");
    ok(&[
        "noise-sweep",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--weights",
        "0,0.3",
        "--seeds",
        "0",
        "--out",
        p(&sweep),
    ]);
    let auc = fs::read_to_string(sweep.join("auc.csv")).unwrap();
    assert_eq!(auc.lines().count(), 3);
    assert!(sweep.join("latents_w0.3.csv").exists());
}
