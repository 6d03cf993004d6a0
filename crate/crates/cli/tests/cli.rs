use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splatnav"))
}

fn small_scene(dir: &Path) -> PathBuf {
    let path = dir.join("scene.ply");
    let out = bin()
        .args(["synth-scene", "--size", "7", "--boxes", "5", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn serve(scene: &Path, input: &str) -> Output {
    let mut child = bin()
        .args(["serve", "--obs", "off"])
        .arg(scene)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn reset_then_close_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let out = serve(&scene, "{\"cmd\":\"reset\",\"seed\":1,\"humans\":0}\n{\"cmd\":\"close\"}\n");
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["outcome"], "running");
    assert!(lines[0]["rel_goal"].as_array().unwrap().len() == 2);
    assert_eq!(lines[1]["closed"], true);
}

#[test]
fn malformed_request_reports_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let out = serve(&scene, "{\"cmd\":\"step\",\"action\":[1,0]}\nnot json\n{\"cmd\":\"close\"}\n");
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].contains("error") && lines[1].contains("error"), "{text}");
}

#[test]
fn plan_writes_trace_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let trace = dir.path().join("trace.jsonl");
    let rec = dir.path().join("rec.json");
    let out = bin()
        .args(["plan", "--seed", "2", "--humans", "0", "--trace"])
        .arg(&trace)
        .arg("--out")
        .arg(&rec)
        .arg(&scene)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["outcome"], "success");
    let events: Vec<serde_json::Value> = std::fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(events.first().unwrap()["event"], "plan");
    assert_eq!(events.last().unwrap()["event"], "done");
    let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rec).unwrap()).unwrap();
    assert!(record["states"].as_array().unwrap().len() > 1);
}

#[test]
fn exhausted_search_exits_with_no_path() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"planner": {"node_budget": 1}}"#).unwrap();
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["plan", "--humans", "0"])
        .arg(&scene)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_and_io_errors_have_their_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    for (text, code) in [(r#"{"planner": {"w_len": -1}}"#, 2), (r#"{"unknown": 1}"#, 2), ("{", 2)] {
        let cfg = dir.path().join("cfg.json");
        std::fs::write(&cfg, text).unwrap();
        let out = bin().arg("--config").arg(&cfg).arg("plan").arg(&scene).output().unwrap();
        assert_eq!(out.status.code(), Some(code), "{text}");
    }
    let out = bin().args(["plan", "does/not/exist.ply"]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn gen_data_then_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let ds = dir.path().join("ds");
    let out = bin()
        .args(["gen-data", "--episodes", "2", "--seed", "5", "--no-render", "--out"])
        .arg(&ds)
        .arg(&scene)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let root = ds.join("synthetic");
    assert!(root.join("manifest.json").is_file());
    assert!(root.join("ep0000/samples.jsonl").is_file() && root.join("ep0001/meta.json").is_file());
    let out = bin().arg("metrics").arg(&root).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("SR") && text.contains("ART") && text.contains("episodes     2"), "{text}");
}

#[test]
fn render_writes_a_png_of_the_camera_size() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let png = dir.path().join("view.png");
    let out = bin()
        .args(["render", "--pose", "1.0,1.0,0.7", "--out"])
        .arg(&png)
        .arg(&scene)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(&png).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    assert_eq!((w, h), (256, 144));
}

#[test]
fn voxelize_writes_maps() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let out_dir = dir.path().join("maps");
    let out = bin().arg("voxelize").arg(&scene).arg("--out").arg(&out_dir).arg("--pgm").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["robot_map.json", "human_map.json", "robot_map.pgm", "human_map.pgm"] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    assert!(out_dir.join("slices").read_dir().unwrap().count() > 0);
}
