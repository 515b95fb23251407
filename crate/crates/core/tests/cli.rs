use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lidar_resample::geom::{Point, PointCloud};
use lidar_resample::io::{read_cloud, write_cloud};
use lidar_resample::restore::RestorationModel;
use lidar_resample::synth::{generate_frames, SensorProfile};
use lidar_resample::tta::read_jsonl;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lidar-resample"));
    c.env_remove("LIDAR_RESAMPLE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn frame(dir: &Path, profile: SensorProfile, seed: u64) -> PathBuf {
    let f = &generate_frames(&profile, 1, seed).unwrap()[0];
    let path = dir.join(format!("f{seed}.bin"));
    write_cloud(&f.cloud, &path).unwrap();
    path
}

#[test]
fn help_for_every_command() {
    let out = ok(&["--help"]);
    for cmd in [
        "estimate-beams",
        "resample",
        "augment",
        "synth",
        "train",
        "tta",
        "bench",
        "report",
    ] {
        assert!(out.contains(cmd), "{cmd} missing from top-level help");
        let help = ok(&[cmd, "--help"]);
        assert!(help.contains("Usage"), "{cmd}");
    }
    let help = ok(&["resample", "--help"]);
    for flag in [
        "--in", "--out", "--op", "--p", "--seed", "--beams", "--offset",
    ] {
        assert!(help.contains(flag), "resample --help lacks {flag}");
    }
    let help = ok(&["tta", "--help"]);
    for flag in [
        "--model", "--list", "--n-iter", "--out", "--lr", "--seed", "--config", "--fg-dir",
    ] {
        assert!(help.contains(flag), "tta --help lacks {flag}");
    }
}

#[test]
fn estimate_beams_counts_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let f = frame(dir.path(), SensorProfile::waymo(), 1);
    let text = ok(&["estimate-beams", "--in", s(&f), "--beams", "64"]);
    assert!(text.contains("bins 64 non_empty 64"), "{text}");

    let json = ok(&["estimate-beams", "--in", s(&f), "--beams", "64", "--json"]);
    let v: serde_json::Value = serde_json::from_str(json.trim()).unwrap();
    let obj = v.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["counts", "phi_max_deg", "phi_min_deg"]);
    assert_eq!(obj["counts"].as_array().unwrap().len(), 64);
    assert!(obj["counts"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c.as_u64().unwrap() > 0));
}

#[test]
fn input_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.bin");
    std::fs::write(&empty, b"").unwrap();
    let out = run(&["estimate-beams", "--in", s(&empty)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty cloud"));

    let trunc = dir.path().join("t.bin");
    std::fs::write(&trunc, [0u8; 20]).unwrap();
    let out = run(&["estimate-beams", "--in", s(&trunc)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("t.bin") && err.contains("offset 16"), "{err}");

    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "x,y,z\n1,2,3\n1,oops,3\n").unwrap();
    let out = run(&["estimate-beams", "--in", s(&csv)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv:3"));

    let out = run(&["estimate-beams", "--in", s(&dir.path().join("missing.bin"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).contains("panicked"));
}

#[test]
fn degenerate_beams_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let flat = dir.path().join("flat.bin");
    let pts = (0..10)
        .map(|i| Point::new(1.0 + i as f64, 0.0, 0.0).with_intensity(0.0))
        .collect();
    write_cloud(&PointCloud::new(pts), &flat).unwrap();
    let out = run(&[
        "resample",
        "--in",
        s(&flat),
        "--out",
        s(&dir.path().join("o.bin")),
        "--op",
        "down2",
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn bad_thread_count_is_an_input_error() {
    let out = bin()
        .env("LIDAR_RESAMPLE_THREADS", "zero")
        .args(["report", "--out-dir", "x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("LIDAR_RESAMPLE_THREADS"));
}

#[test]
fn resample_operations() {
    let dir = tempfile::tempdir().unwrap();
    let f = frame(dir.path(), SensorProfile::waymo(), 2);
    let input = read_cloud(&f).unwrap();

    let none = dir.path().join("none.bin");
    ok(&["resample", "--in", s(&f), "--out", s(&none), "--op", "none"]);
    assert_eq!(std::fs::read(&none).unwrap(), std::fs::read(&f).unwrap());

    let down = dir.path().join("down.bin");
    let text = ok(&[
        "resample",
        "--in",
        s(&f),
        "--out",
        s(&down),
        "--op",
        "down2",
        "--p",
        "0",
    ]);
    assert_eq!(
        text.trim(),
        format!(
            "in {} out {}",
            input.len(),
            read_cloud(&down).unwrap().len()
        )
    );
    // 64 equally filled beams, every other bin kept
    assert_eq!(read_cloud(&down).unwrap().len() * 2, input.len());

    let q = frame(dir.path(), SensorProfile::nuscenes(), 3);
    let up = dir.path().join("up.bin");
    ok(&[
        "resample",
        "--in",
        s(&q),
        "--out",
        s(&up),
        "--op",
        "up2",
        "--beams",
        "32",
    ]);
    let text = ok(&["estimate-beams", "--in", s(&up), "--beams", "63"]);
    assert!(text.contains("bins 63 non_empty 63"), "{text}");
}

#[test]
fn augment_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let f = frame(dir.path(), SensorProfile::kitti(), 4);
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    let ta = ok(&["augment", "--in", s(&f), "--out", s(&a), "--seed", "11"]);
    let tb = ok(&["augment", "--in", s(&f), "--out", s(&b), "--seed", "11"]);
    assert_eq!(ta, tb);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // find a seed that reports `none` and check it rewrites the input
    let out = dir.path().join("n.bin");
    let seed = (0..64)
        .find(|s| {
            ok(&[
                "augment",
                "--in",
                f.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--seed",
                &s.to_string(),
            ])
            .starts_with("op none")
        })
        .expect("a none draw within 64 seeds");
    ok(&[
        "augment",
        "--in",
        s(&f),
        "--out",
        s(&out),
        "--seed",
        &seed.to_string(),
    ]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&f).unwrap());
}

#[test]
fn augment_policy_frequencies_over_1000_seeds() {
    let dir = tempfile::tempdir().unwrap();
    // small two-beam cloud keeps each run cheap
    let mut pts = Vec::new();
    for (k, z) in [-0.2, 0.2].iter().enumerate() {
        for j in 0..20 {
            let a = j as f64 * 0.3 + k as f64 * 0.01;
            pts.push(Point::new(a.cos(), a.sin(), *z).with_intensity(0.0));
        }
    }
    let f = dir.path().join("small.bin");
    write_cloud(&PointCloud::new(pts), &f).unwrap();
    let out = dir.path().join("o.bin");
    let mut counts = std::collections::BTreeMap::new();
    for seed in 0..1000 {
        let text = ok(&[
            "augment",
            "--in",
            s(&f),
            "--out",
            s(&out),
            "--seed",
            &seed.to_string(),
            "--beams",
            "2",
        ]);
        let op = text.split_whitespace().nth(1).unwrap().to_owned();
        *counts.entry(op).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 4, "{counts:?}");
    for (op, n) in &counts {
        let f = *n as f64 / 1000.0;
        assert!((f - 0.25).abs() <= 0.05, "{op}: {f}");
    }
}

#[test]
fn train_with_zero_epochs_keeps_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--out-dir",
        s(&data),
        "--frames",
        "2",
        "--seed",
        "1",
    ]);
    let ckpt = dir.path().join("m.ckpt");
    let csv = dir.path().join("r.csv");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--report",
        s(&csv),
        "--epochs",
        "0",
        "--seed",
        "3",
    ]);
    assert_eq!(
        RestorationModel::load(&ckpt).unwrap(),
        RestorationModel::new(3)
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
}

#[test]
fn config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--out-dir",
        s(&data),
        "--frames",
        "1",
        "--seed",
        "1",
    ]);
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 5, "train": {"det_epochs": 1, "ssl_epochs": 0}}"#,
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let csv = dir.path().join("r.csv");
    let base = [
        "train",
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--report",
        s(&csv),
    ];

    // built-in defaults when neither file nor flag sets a value
    let out = ok(&[&base[..], &["--det-epochs", "0", "--ssl-epochs", "0"]].concat());
    assert!(out.contains("epochs 0+0 seed 0"), "{out}");
    // file over defaults
    let out = ok(&[&base[..], &["--config", s(&cfg)]].concat());
    assert!(out.contains("epochs 1+0 seed 5"), "{out}");
    // flag over file
    let out = ok(&[
        &base[..],
        &["--config", s(&cfg), "--det-epochs", "0", "--seed", "9"],
    ]
    .concat());
    assert!(out.contains("epochs 0+0 seed 9"), "{out}");

    std::fs::write(&cfg, r#"{"seeed": 5}"#).unwrap();
    let out = run(&[&base[..], &["--config", s(&cfg)]].concat());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

#[test]
fn tta_without_iterations_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    RestorationModel::new(0).save(&ckpt).unwrap();
    let q = frame(dir.path(), SensorProfile::nuscenes(), 5);
    let list = dir.path().join("list.txt");
    std::fs::write(
        &list,
        format!("{}\n", q.file_name().unwrap().to_str().unwrap()),
    )
    .unwrap();
    let jsonl = dir.path().join("r.jsonl");
    let fg = dir.path().join("fg");
    ok(&[
        "tta",
        "--model",
        s(&ckpt),
        "--list",
        s(&list),
        "--out",
        s(&jsonl),
        "--n-iter",
        "0",
        "--fg-dir",
        s(&fg),
    ]);
    let recs = read_jsonl(&jsonl).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].losses.len(), 1);
    assert_eq!(recs[0].status, "no adaptation");
    assert!(recs[0].params_restored);
    // 3 x u32 header plus one f32 per latent cell of the 128x128x16 grid
    assert_eq!(
        std::fs::metadata(fg.join("query_0000.grid")).unwrap().len(),
        12 + 4 * 16 * 16 * 2
    );
}

#[test]
fn report_needs_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["report", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to plot"));
}
