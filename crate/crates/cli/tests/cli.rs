use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dtv_core::image::{read_image, write_image, SampleFormat};
use dtv_core::Image;
use serde_json::Value;
use tempfile::TempDir;

fn dtv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtv"))
        .args(args)
        .output()
        .expect("spawn dtv")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

fn small_scene(dir: &Path) -> PathBuf {
    write_config(
        dir,
        r#"{"synthetic": {"width": 32, "height": 32, "seed": 3}}"#,
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trajectory(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("trajectory.json")).unwrap()).unwrap()
}

#[test]
fn synth_writes_first_step_and_metadata() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_scene(tmp.path());
    let out = tmp.path().join("synth");
    let o = dtv(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("step_0.png").is_file());
    assert!(out.join("config.resolved.json").is_file());
    let t = trajectory(&out);
    assert_eq!(t["termination_reason"], "synthesis_only");
    assert_eq!(t["steps"], 1);
}

#[test]
fn missing_manifest_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere").join("manifest.json");
    let o = dtv(&[
        "synth",
        "--scene",
        s(&missing),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{"synthetic": {}, "tau": 1}"#);
    let o = dtv(&[
        "synth",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn out_of_range_parameters_are_rejected_before_running() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_scene(tmp.path());
    let out = tmp.path().join("o");
    let o = dtv(&[
        "evolve",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--tau-stop",
        "-1",
    ]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

fn closed_port() -> u16 {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().port()
}

#[test]
fn unreachable_backend_exits_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"synthetic": {"width": 16, "height": 16}, "backend": {"retries": 0, "timeout_ms": 2000}}"#,
    );
    let url = format!("http://127.0.0.1:{}", closed_port());
    let o = dtv(&[
        "synth",
        "--config",
        s(&cfg),
        "--backend",
        &url,
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn evolve_converges_with_contracting_mock() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_scene(tmp.path());
    let out = tmp.path().join("run");
    let o = dtv(&[
        "evolve",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--tau-stop",
        "0.01",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = trajectory(&out);
    assert_eq!(t["termination_reason"], "converged");
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("step 1: I ="));
    assert!(stdout.contains("termination: converged"));
    // Each evolution step halves the residual toward the target.
    let i: Vec<f64> = t["intensities"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    for w in i[1..].windows(2) {
        assert!((w[1] / w[0] - 0.5).abs() < 1e-3, "{i:?}");
    }
}

#[test]
fn zero_tau_runs_to_the_step_cap() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_scene(tmp.path());
    let out = tmp.path().join("run");
    let o = dtv(&[
        "evolve",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--tau-stop",
        "0",
        "--max-steps",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = trajectory(&out);
    assert_eq!(t["termination_reason"], "max_steps");
    assert_eq!(t["steps"], 5);
    assert!(out.join("step_4.png").is_file());
}

#[test]
fn nan_backend_aborts_with_partial_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_scene(tmp.path());
    let out = tmp.path().join("run");
    let o = dtv(&[
        "evolve",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--backend",
        "nan",
        "--tau-stop",
        "0",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let t = trajectory(&out);
    assert_eq!(t["termination_reason"], "aborted");
    assert!(out.join("step_0.png").is_file());
    assert!(out.join("step_1.png").is_file());
    assert!(!out.join("step_2.png").exists());
}

#[test]
fn evolve_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_scene(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = dtv(&[
            "evolve",
            "--config",
            s(&cfg),
            "--out",
            s(out),
            "--seed",
            "11",
            "--prompt",
            "add moss to the wall",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut compared = 0;
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "config.resolved.json" {
            continue;
        }
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name:?} differs"
        );
        compared += 1;
    }
    assert!(compared >= 4);
}

fn gradient_image(path: &Path) {
    let img = Image::from_fn(24, 24, 3, |x, y, c| {
        ((x * 7 + y * 3 + c * 5) % 24) as f64 / 24.0
    });
    write_image(&img, path, SampleFormat::U16).unwrap();
}

#[test]
fn user_mask_edit_changes_only_the_region() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("input.png");
    gradient_image(&input);
    let mask = tmp.path().join("mask.png");
    let region = Image::from_fn(24, 24, 1, |x, y, _| {
        if (6..14).contains(&x) && (8..16).contains(&y) {
            1.0
        } else {
            0.0
        }
    });
    write_image(&region, &mask, SampleFormat::U8).unwrap();
    // No dilation or feathering so the refined mask is the region itself.
    let cfg = write_config(
        tmp.path(),
        r#"{"engine": {"mask": {"mode": "user", "threshold": 0.5, "dilation_radius": 0, "sigma": 0.0}}}"#,
    );
    let out = tmp.path().join("edit");
    let o = dtv(&[
        "edit",
        "--config",
        s(&cfg),
        "--input",
        s(&input),
        "--mask",
        s(&mask),
        "--prompt",
        "weather it",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (before, _) = read_image(&input).unwrap();
    let (after, _) = read_image(&out.join("output.png")).unwrap();
    let (refined, _) = read_image(&out.join("mask.png")).unwrap();
    let mut changed_inside = 0;
    for y in 0..24 {
        for x in 0..24 {
            let moved = (0..3).any(|c| before.get(x, y, c) != after.get(x, y, c));
            if refined.get(x, y, 0) == 0.0 {
                assert!(!moved, "pixel ({x}, {y}) changed outside the mask");
            } else if moved {
                changed_inside += 1;
            }
        }
    }
    assert!(changed_inside > 0);
    assert!(out.join("dtv.exr").is_file());
    let side: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("mask.json")).unwrap()).unwrap();
    assert_eq!(side["source"], "user");
}

#[test]
fn auto_mask_edit_records_its_source() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("input.png");
    gradient_image(&input);
    let cfg = write_config(
        tmp.path(),
        r#"{"segmenter": {"kind": "rect", "rects": {"wall": {"x0": 0, "y0": 0, "x1": 24, "y1": 10}}}}"#,
    );
    let out = tmp.path().join("edit");
    let o = dtv(&[
        "edit",
        "--config",
        s(&cfg),
        "--input",
        s(&input),
        "--prompt",
        "add cracks to the wall",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let side: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("mask.json")).unwrap()).unwrap();
    assert_eq!(side["source"], "auto");
    assert_eq!(side["entity"], "cracks");
}

#[test]
fn abstract_prompt_without_mask_exits_5_with_hint() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("input.png");
    gradient_image(&input);
    let o = dtv(&[
        "edit",
        "--input",
        s(&input),
        "--prompt",
        "make it more realistic",
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("--mask"));
}

fn manifest_lines(dir: &Path) -> usize {
    std::fs::read_to_string(dir.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .count()
}

#[test]
fn dataset_build_counts_and_resumes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"synthetic": {"id": "room", "width": 32, "height": 32}, "dataset": {"synthetic_count": 3, "forge": {"steps": 2}}}"#,
    );
    let out = tmp.path().join("data");
    let o = dtv(&[
        "dataset",
        "build",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--workers",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(manifest_lines(&out), 6);
    let o = dtv(&[
        "dataset",
        "build",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--workers",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("skipped: 3"));
    assert_eq!(manifest_lines(&out), 6);
}

#[test]
fn eval_writes_report_files() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_scene(tmp.path());
    let runs = tmp.path().join("runs");
    for (name, seed) in [("r0", "1"), ("r1", "2")] {
        let o = dtv(&[
            "evolve",
            "--config",
            s(&cfg),
            "--out",
            s(&runs.join(name)),
            "--seed",
            seed,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let out = tmp.path().join("eval");
    let o = dtv(&["eval", s(&runs), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(out.join("eval.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"], 2);
    assert!(summary["psnr"].as_f64().unwrap() > 0.0);
}
