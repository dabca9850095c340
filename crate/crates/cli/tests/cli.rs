use std::path::Path;
use std::process::{Command, Output};

const SMALL_SESSION: &str = r#"
noise_deg = 0.6

[scan]
camera = { fx = 262.0, fy = 262.0, cx = 159.5, cy = 119.5, width = 320, height = 240 }
rate_hz = 10.0

[[scan.pose]]
t = 0.0
eye = [-0.3, -0.4, 0.8]
target = [-0.3, 0.5, 0.25]

[[scan.pose]]
t = 2.0
eye = [0.3, -0.4, 0.8]
target = [0.3, 0.5, 0.25]

[eye_tracker]
camera = { fx = 260.0, fy = 260.0, cx = 159.5, cy = 119.5, width = 320, height = 240 }
rate_hz = 30.0

[[eye_tracker.pose]]
t = 0.0
eye = [-0.2, -0.6, 0.9]
target = [0.0, 0.6, 0.35]

[[eye_tracker.pose]]
t = 1.0
eye = [0.2, -0.6, 0.9]
target = [0.0, 0.6, 0.35]

[[gaze]]
start = 0.0
end = 1.0
target = [0.002, 0.6, 0.352]
"#;

fn gazemap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazemap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_config_key_is_config_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[volume]\nvoxel = 0.01\n").unwrap();
    let o = gazemap(&["--config", s(&cfg), "localize", "--data", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: config-invalid:"), "{}", stderr(&o));
}

#[test]
fn invalid_config_value_is_config_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[volume]\nsub_volume_edge = 48\n").unwrap();
    let o = gazemap(&["--config", s(&cfg), "map-build", "--data", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = gazemap(&["--threads", "0", "map-build", "--data", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_input_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for stage in ["map-build", "localize", "gaze-map", "roi-detect", "roi-map", "analyze"] {
        let o = gazemap(&["--out", s(&out), stage, "--data", s(&dir.path().join("nowhere"))]);
        assert_eq!(o.status.code(), Some(3), "{stage}: {}", stderr(&o));
        let e = stderr(&o);
        assert!(
            e.starts_with("error: input-invalid:") || e.starts_with("error: io-error:"),
            "{stage}: {e}"
        );
        assert_eq!(e.lines().count(), 1, "{stage}: {e}");
    }
}

#[test]
fn unreadable_scene_spec_is_input_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.toml");
    std::fs::write(&scene, "bounds = 3\n").unwrap();
    let o = gazemap(&["--out", s(&dir.path().join("d")), "synth", "--scene", s(&scene)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn small_session_runs_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let session = dir.path().join("session.toml");
    std::fs::write(&session, SMALL_SESSION).unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");

    let o = gazemap(&["--out", s(&data), "--seed", "3", "synth", "--session", s(&session)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = String::from_utf8_lossy(&o.stdout);
    assert!(summary.starts_with("20 scan frames, 30 eye-tracker frames"), "{summary}");
    assert!(data.join("scan/depth/000000.png").exists());
    assert!(data.join("manifest.txt").exists());

    let o = gazemap(&["--out", s(&out), "--seed", "3", "pipeline", "--data", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for stage in ["map", "localize", "gaze", "detect", "roi", "report"] {
        let manifest = std::fs::read_to_string(out.join(stage).join("manifest.txt")).unwrap();
        assert!(manifest.contains("seed = 3"), "{stage}: {manifest}");
        assert!(manifest.contains("output = "), "{stage}: {manifest}");
    }
    assert!(out.join("map/mesh.ply").exists());
    assert!(out.join("gaze/hits.csv").exists());

    let report = std::fs::read_to_string(out.join("localize/report.txt")).unwrap();
    let line = report.lines().find(|l| l.starts_with("localized = ")).unwrap();
    let ratio = line.trim_start_matches("localized = ");
    let (count, pct) = ratio.split_once(" (").unwrap();
    let count: usize = count.parse().unwrap();
    let pct = pct.strip_suffix("%)").unwrap();
    assert_eq!(pct.split_once('.').unwrap().1.len(), 2, "{line}");
    let pct: f64 = pct.parse().unwrap();
    assert!((pct - 100.0 * count as f64 / 30.0).abs() < 0.005, "{line}");

    // A single stage rerun reproduces the pipeline's artifact.
    let again = dir.path().join("again");
    for stage in ["map-build", "localize"] {
        let o = gazemap(&["--out", s(&again), "--seed", "3", stage, "--data", s(&data)]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for file in ["map/mesh.ply", "map/poses.csv", "localize/poses.csv", "localize/report.txt"] {
        assert_eq!(
            std::fs::read(out.join(file)).unwrap(),
            std::fs::read(again.join(file)).unwrap(),
            "{file}"
        );
    }
}
