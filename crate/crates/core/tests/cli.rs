use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgm")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) {
    let out = dgm(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &[(&str, &str)] = &[
    ("vae", "epochs = 2\nbatch_size = 64\nhidden = 16\nlatent = 4\n"),
    ("gan", "epochs = 2\nbatch_size = 64\nhidden = 16\nnoise_dim = 4\nentropy_rows = 50\n"),
    ("flow", "epochs = 2\nbatch_size = 64\nhidden = 16\nlayers = 2\n"),
    ("ddpm", "epochs = 2\nbatch_size = 64\nhidden = 16\nembed_dim = 8\nsteps = 20\n"),
    ("ncsn", "epochs = 2\nbatch_size = 64\nhidden = 16\nlevels = 3\nsteps_per_level = 5\n"),
];

fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    ok(&["fixture", "--n", "300", "--seed", "3", "--out", s(dir)]);
    (dir.join("data.csv"), dir.join("schema.txt"))
}

fn train_and_sample(dir: &Path, data: &Path, schema: &Path, kind: &str, cfg: &str, tag: &str) -> (Vec<u8>, Vec<u8>) {
    let cfg_path = dir.join(format!("{kind}.cfg"));
    std::fs::write(&cfg_path, cfg).unwrap();
    let out = dir.join(format!("{kind}-{tag}"));
    ok(&[
        "train", "--model", kind, "--data", s(data), "--schema", s(schema), "--config", s(&cfg_path), "--seed", "9",
        "--out", s(&out),
    ]);
    for f in ["checkpoint.txt", "loss_trace.csv", "config.txt"] {
        assert!(out.join(f).exists(), "{kind}: missing {f}");
    }
    let samples = out.join("samples.csv");
    ok(&["sample", "--checkpoint", s(&out.join("checkpoint.txt")), "--n", "200", "--seed", "4", "--out", s(&samples)]);
    (std::fs::read(out.join("checkpoint.txt")).unwrap(), std::fs::read(samples).unwrap())
}

#[test]
fn train_then_sample_is_reproducible_for_every_model() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = fixture(dir.path());
    for (kind, cfg) in TINY {
        let a = train_and_sample(dir.path(), &data, &schema, kind, cfg, "a");
        let b = train_and_sample(dir.path(), &data, &schema, kind, cfg, "b");
        assert_eq!(a, b, "{kind}");
        let text = String::from_utf8(a.1).unwrap();
        assert_eq!(text.lines().next(), Some("origin_type,activity_type,mode_type,destination_type"));
        assert_eq!(text.lines().count(), 201);
    }
}

#[test]
fn resolved_config_echo_retrains_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = fixture(dir.path());
    let (_, cfg) = TINY[2];
    let (ck, _) = train_and_sample(dir.path(), &data, &schema, "flow", cfg, "first");
    let echo = dir.path().join("flow-first/config.txt");
    let text = std::fs::read_to_string(&echo).unwrap();
    assert!(text.contains("seed = 9\n") && text.contains("layers = 2\n"));
    let out = dir.path().join("flow-echo");
    ok(&["train", "--model", "flow", "--data", s(&data), "--schema", s(&schema), "--config", s(&echo), "--out", s(&out)]);
    assert_eq!(std::fs::read(out.join("checkpoint.txt")).unwrap(), ck);
}

#[test]
fn sample_zero_rows_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = fixture(dir.path());
    let (kind, cfg) = TINY[0];
    train_and_sample(dir.path(), &data, &schema, kind, cfg, "z");
    let out = dir.path().join("empty.csv");
    ok(&["sample", "--checkpoint", s(&dir.path().join("vae-z/checkpoint.txt")), "--n", "0", "--out", s(&out)]);
    assert_eq!(std::fs::read_to_string(out).unwrap(), "origin_type,activity_type,mode_type,destination_type\n");
}

#[test]
fn evaluate_writes_report_and_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = fixture(dir.path());
    let out = dir.path().join("eval");
    ok(&["evaluate", "--real", s(&data), "--synth", s(&data), "--schema", s(&schema), "--out", s(&out)]);
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("tv.mode_type = 0.0000000000000000e0\n"), "{report}");
    assert!(report.contains("tvpair.origin_type.destination_type = "));
    let hist = std::fs::read_to_string(out.join("hist_activity_type.csv")).unwrap();
    assert_eq!(hist.lines().count(), 10);
}

#[test]
fn smooth_writes_fields_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("traj.csv");
    let mut text = String::from("vehicle_id,t,x\n");
    for v in 0..20 {
        for k in 0..30 {
            let t = v as f64 * 15.0 + k as f64 * 4.0;
            text.push_str(&format!("veh{v},{t},{}\n", k as f64 * 4.0 * 20.0));
        }
    }
    std::fs::write(&traj, text).unwrap();
    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "x_origin = 0\ndx = 200\nnx = 12\nt_origin = 0\ndt = 20\nnt = 20\n").unwrap();
    let params = dir.path().join("params.txt");
    std::fs::write(&params, "aggregation = edie\nwindow = 1\n").unwrap();
    let out = dir.path().join("smooth");
    ok(&["smooth", "--trajectories", s(&traj), "--grid", s(&grid), "--params", s(&params), "--out", s(&out)]);
    let smoothed = std::fs::read_to_string(out.join("smoothed.csv")).unwrap();
    assert!(!smoothed.contains("NaN"));
    for line in smoothed.lines().skip(1) {
        for v in line.split(',').skip(1) {
            assert!((v.parse::<f64>().unwrap() - 20.0).abs() < 1e-9, "{v}");
        }
    }
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("aggregation = edie\n") && report.contains("records_dropped = "));
    assert!(std::fs::read_to_string(out.join("raw.csv")).unwrap().contains("NaN"));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = dgm(&["evaluate", "--real", s(&missing), "--synth", s(&missing), "--schema", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
    let out = dgm(&["train", "--model", "transformer"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(dgm(&["bogus"]).status.code(), Some(2));

    let (data, schema) = fixture(dir.path());
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "warp_factor = 9\n").unwrap();
    let out = dgm(&["train", "--model", "vae", "--data", s(&data), "--schema", s(&schema), "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_factor"));
}
