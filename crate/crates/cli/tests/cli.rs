use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn radcam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radcam"))
        .args(args)
        .env("RADCAM_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Relative path and contents of every file under `dir`, sorted.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    let (ta, tb) = (tree(a), tree(b));
    let names = |t: &[(PathBuf, Vec<u8>)]| t.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
    assert_eq!(names(&ta), names(&tb));
    for ((name, x), (_, y)) in ta.iter().zip(&tb) {
        assert!(x == y, "{} differs", name.display());
    }
}

#[test]
fn simulate_zero_frames() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let stdout = ok(&radcam(&["simulate", "--frames", "0", "--out", path_str(&out)]));
    assert!(stdout.contains("simulated 0 frames"));
    assert_eq!(fs::read_dir(out.join("frames")).unwrap().count(), 0);
    assert!(out.join("config.toml").exists());
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&radcam(&[
            "simulate",
            "--frames",
            "3",
            "--seed",
            "9",
            "--out",
            path_str(out),
        ]));
    }
    assert_eq!(tree(&a).len(), 3 * 2 + 2);
    assert_same_tree(&a, &b);
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[scene]\nlane_count = 0\n").unwrap();
    let out = radcam(&[
        "simulate",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene.lane_count"));
}

#[test]
fn missing_output_directory_is_a_config_error() {
    let out = radcam(&["simulate", "--frames", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = radcam(&[
        "evaluate",
        "--stub",
        "identity",
        "--dataset",
        path_str(&dir.path().join("nowhere")),
        "--out",
        path_str(&dir.path().join("report")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("small.toml");
    fs::write(
        &cfg,
        "seed = 3\n[counts]\ntrain = 200\nval = 40\ntest = 40\n[eval]\nn_decals = 3\nwindows = [1, 5]\noverlays = 2\n",
    )
    .unwrap();
    cfg
}

#[test]
fn dataset_version_mismatch_has_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ds = dir.path().join("ds");
    ok(&radcam(&[
        "gen-dataset",
        "--config",
        path_str(&cfg),
        "--train",
        "4",
        "--val",
        "2",
        "--test",
        "2",
        "--out",
        path_str(&ds),
    ]));
    let manifest = ds.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(
        &manifest,
        text.replace("\"format_version\": 1", "\"format_version\": 99"),
    )
    .unwrap();
    let out = radcam(&[
        "evaluate",
        "--stub",
        "identity",
        "--dataset",
        path_str(&ds),
        "--out",
        path_str(&dir.path().join("report")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn decals_per_frame_flag_reaches_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let args = |n: &'static str| {
        vec![
            "gen-dataset",
            "--train",
            "6",
            "--val",
            "2",
            "--test",
            "2",
            "--decals-per-frame",
            n,
            "--out",
        ]
    };
    let mut ok_args = args("3");
    ok_args.push(path_str(&ds));
    let stdout = ok(&radcam(&ok_args));
    assert!(stdout.contains("6 train"), "{stdout}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ds.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train_decals_per_frame"], 3);

    let mut bad_args = args("0");
    let bad = dir.path().join("bad");
    bad_args.push(path_str(&bad));
    assert_eq!(radcam(&bad_args).status.code(), Some(2));
}

fn table_rows(report: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(report.join("table.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).take(4).map(str::to_owned).collect())
        .collect()
}

#[test]
fn full_pipeline() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = path_str(&cfg);
    let p = |name: &str| dir.path().join(name);

    ok(&radcam(&[
        "simulate",
        "--config",
        cfg,
        "--frames",
        "4",
        "--out",
        path_str(&p("sim")),
    ]));
    ok(&radcam(&["gen-dataset", "--config", cfg, "--out", path_str(&p("ds"))]));
    ok(&radcam(&[
        "gen-dataset",
        "--config",
        cfg,
        "--out",
        path_str(&p("ds_again")),
    ]));
    assert_same_tree(&p("ds"), &p("ds_again"));

    let stdout = ok(&radcam(&[
        "train",
        "--config",
        cfg,
        "--dataset",
        path_str(&p("ds")),
        "--epochs",
        "2",
        "--out",
        path_str(&p("run")),
    ]));
    assert!(
        stdout.contains("coarse: 2 epochs") || stdout.contains("coarse: 1 epochs"),
        "{stdout}"
    );
    for f in [
        "config.toml",
        "stage1.ckpt",
        "stage2.ckpt",
        "history.csv",
        "cascade.json",
        "inputs.json",
    ] {
        assert!(p("run").join(f).exists(), "{f}");
    }

    for protocol in ["random", "static", "temporal"] {
        let report = p(&format!("report_{protocol}"));
        ok(&radcam(&[
            "evaluate",
            "--config",
            cfg,
            "--run",
            path_str(&p("run")),
            "--dataset",
            path_str(&p("ds")),
            "--protocol",
            protocol,
            "--out",
            path_str(&report),
        ]));
        assert!(report.join("errors.csv").exists());
        assert!(report.join("histograms/fine_total.svg").exists());
        assert_eq!(fs::read_dir(report.join("overlays")).unwrap().count(), 2);
    }
    assert!(p("report_static").join("static.csv").exists());
    assert!(p("report_temporal").join("temporal.csv").exists());

    ok(&radcam(&[
        "gen-dataset",
        "--config",
        cfg,
        "--rig",
        "secondary",
        "--train",
        "1",
        "--val",
        "1",
        "--test",
        "20",
        "--out",
        path_str(&p("ds2")),
    ]));
    let stdout = ok(&radcam(&[
        "evaluate",
        "--config",
        cfg,
        "--run",
        path_str(&p("run")),
        "--dataset",
        path_str(&p("ds2")),
        "--protocol",
        "generalization",
        "--baseline",
        path_str(&p("ds")),
        "--out",
        path_str(&p("report_gen")),
    ]));
    assert!(stdout.contains("on rig2"), "{stdout}");
    assert!(p("report_gen").join("generalization.json").exists());

    let stdout = ok(&radcam(&[
        "calibrate",
        "--config",
        cfg,
        "--run",
        path_str(&p("run")),
        "--frames",
        path_str(&p("sim")),
        "--frame-id",
        "1",
        "--out",
        path_str(&p("calib")),
    ]));
    assert!(stdout.lines().next().unwrap().starts_with("H: "));
    assert!(stdout.contains("q_coarse: ") && stdout.contains("q_fine: "));
    assert!(p("calib/overlay_000001.ppm").exists());

    assert!(started.elapsed() < Duration::from_secs(600));
}

#[test]
fn identity_stub_reports_initial_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ds = dir.path().join("ds");
    ok(&radcam(&[
        "gen-dataset",
        "--config",
        path_str(&cfg),
        "--train",
        "2",
        "--val",
        "2",
        "--test",
        "12",
        "--out",
        path_str(&ds),
    ]));
    let report = dir.path().join("report");
    ok(&radcam(&[
        "evaluate",
        "--stub",
        "identity",
        "--dataset",
        path_str(&ds),
        "--out",
        path_str(&report),
    ]));
    let rows = table_rows(&report);
    assert_eq!(rows[0], rows[1]);
    assert_eq!(rows[0], rows[2]);

    let report = dir.path().join("oracle");
    ok(&radcam(&[
        "evaluate",
        "--stub",
        "oracle",
        "--dataset",
        path_str(&ds),
        "--out",
        path_str(&report),
    ]));
    assert_eq!(table_rows(&report)[2], vec!["0.00", "0.00", "0.00", "0.00"]);
}

#[test]
fn calibrate_with_oracle_stub_recovers_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&radcam(&["simulate", "--frames", "1", "--out", path_str(&sim)]));
    let rig: serde_json::Value = serde_json::from_str(&fs::read_to_string(sim.join("rig.json")).unwrap()).unwrap();
    let h_gt: Vec<f64> = serde_json::from_value(rig["h_gt"].clone()).unwrap();
    assert_eq!(h_gt.len(), 16);
    let stdout = ok(&radcam(&[
        "calibrate",
        "--stub",
        "oracle",
        "--frames",
        path_str(&sim),
        "--h-init",
        "H: 1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1",
        "--out",
        path_str(&dir.path().join("calib")),
    ]));
    let err_line = stdout.lines().find(|l| l.starts_with("error vs ground truth")).unwrap();
    assert!(err_line.ends_with("total 0.0000 deg"), "{err_line}");
}
