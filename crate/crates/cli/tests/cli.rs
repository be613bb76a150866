use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use streetgaze::simulate::{simulate, SimulationConfig};
use streetgaze::{EXIT_OK, EXIT_VALIDATION};
use streetgaze_core::similarity::ingest_lpips;
use streetgaze_core::CamMethod;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn streetgaze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streetgaze"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_study(dir: &Path) -> PathBuf {
    let cfg = SimulationConfig::parse("seed = 3\nimages = 4\nparticipants = 2\npairs_per_session = 4\nwidth = 64\nheight = 48\n[bias]\ncar = 0.5\n").unwrap();
    simulate(&cfg, dir).unwrap().manifest
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_writes_every_stage_output() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_study(dir.path());
    let out = streetgaze(&["run", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", stderr(&out));
    let root = dir.path().join("out");
    for f in [
        "fixations.jsonl",
        "ingest_summary.json",
        "metrics/mor.csv",
        "metrics/morh_t15.csv",
        "metrics/morh_t30.csv",
        "metrics/moh.csv",
        "groups.csv",
        "similarity/scores.csv",
        "similarity/table.txt",
        "report/report.txt",
        "report/index.html",
        "report/means.csv",
        "run_status.json",
    ] {
        assert!(root.join(f).is_file(), "missing {f}");
    }
    let status: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("run_status.json")).unwrap()).unwrap();
    assert!(status.as_object().unwrap().values().all(|s| s["outcome"] == "ok"));
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_study(dir.path());
    let m = manifest.to_str().unwrap();
    let out = streetgaze(&["heatmap", "--manifest", m]);
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    assert!(stderr(&out).contains("run the ingest stage first"));
    for stage in ["ingest", "heatmap", "metrics", "group", "compare", "report"] {
        let out = streetgaze(&[stage, "--manifest", m]);
        assert_eq!(out.status.code(), Some(EXIT_OK), "{stage}: {}", stderr(&out));
    }
    assert!(dir.path().join("out/report/index.html").is_file());
}

#[test]
fn missing_manifest_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_study(dir.path());
    let text = fs::read_to_string(&manifest).unwrap().replace("segmentation_dir = \"segmentation\"\n", "");
    fs::write(&manifest, text).unwrap();
    let out = streetgaze(&["run", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    assert!(stderr(&out).contains("segmentation_dir"), "{}", stderr(&out));
}

#[test]
fn strict_mode_rejects_malformed_gaze_and_lenient_reports_it() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_study(dir.path());
    fs::copy(fixture("gaze_malformed.jsonl"), dir.path().join("bad.jsonl")).unwrap();
    let text = fs::read_to_string(&manifest).unwrap().replace("\"gaze.jsonl\"", "\"bad.jsonl\"");
    fs::write(&manifest, format!("{text}strict = true\n")).unwrap();
    let out = streetgaze(&["ingest", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    fs::write(&manifest, text).unwrap();
    let out = streetgaze(&["ingest", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/ingest_summary.json")).unwrap()).unwrap();
    let lines: Vec<u64> = summary["files"][0]["diagnostics"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["line"].as_u64().unwrap())
        .collect();
    assert_eq!(lines, [3, 5]);
    assert_eq!(summary["files"][0]["records"], 2);
}

#[test]
fn compare_is_skipped_without_cam_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_study(dir.path());
    let text = fs::read_to_string(&manifest).unwrap();
    let start = text.find("[xai]").unwrap();
    let end = text.find("[params]").unwrap();
    fs::write(&manifest, format!("{}{}", &text[..start], &text[end..])).unwrap();
    let out = streetgaze(&["run", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("skipped"));
    assert!(!dir.path().join("out/similarity/table.txt").exists());
}

#[test]
fn threshold_out_of_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_study(dir.path());
    let text = fs::read_to_string(&manifest).unwrap().replace("thresholds = [15, 30]", "thresholds = [15, 151]");
    fs::write(&manifest, text).unwrap();
    let out = streetgaze(&["run", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
    assert!(stderr(&out).contains("params.thresholds"));
}

#[test]
fn stratify_writes_an_image_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("images.csv");
    let out = streetgaze(&[
        "stratify",
        "--scores",
        fixture("scores.csv").to_str().unwrap(),
        "--per-stratum",
        "1",
        "--seed",
        "11",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", stderr(&out));
    let text = fs::read_to_string(&out_path).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "image_id,stratum");
    assert_eq!(rows.len(), 4);
    let parsed = streetgaze_service::parse_image_manifest(&text).unwrap();
    assert_eq!(parsed.len(), 3);
    assert!(!text.contains("j,"), "an image in different bands per model is never selected");

    let out = streetgaze(&["stratify", "--scores", fixture("scores.csv").to_str().unwrap(), "--per-stratum", "2"]);
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
}

#[test]
fn simulate_rejects_a_single_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, "images = 1\n").unwrap();
    let out = streetgaze(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_VALIDATION));
}

#[test]
fn simulate_with_no_participants_writes_empty_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimulationConfig::parse("images = 3\nparticipants = 0\n").unwrap();
    let summary = simulate(&cfg, dir.path()).unwrap();
    assert_eq!(summary.sessions, 0);
    let comparisons = fs::read_to_string(dir.path().join("comparisons.jsonl")).unwrap();
    assert_eq!(comparisons.lines().count(), 1, "header only");
}

#[test]
fn sidecar_lpips_fixture_is_readable() {
    let text = fs::read_to_string(fixture("lpips_sidecar.jsonl")).unwrap();
    let table = ingest_lpips(text.as_bytes()).unwrap();
    assert_eq!(table.get("img000", CamMethod::EigenCAM), Some(0.5478));
    assert_eq!(table.get("img001", CamMethod::EigenCAM), None);
}

#[test]
fn group_means_skip_ambiguous_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimulationConfig::parse("seed = 5\nimages = 6\nparticipants = 6\npairs_per_session = 6\nwidth = 64\nheight = 48\n").unwrap();
    let manifest = simulate(&cfg, dir.path()).unwrap().manifest;
    let out = streetgaze(&["run", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", stderr(&out));
    let groups = fs::read_to_string(dir.path().join("out/groups.csv")).unwrap();
    let count = |g: &str| groups.lines().filter(|l| l.split(',').nth(1) == Some(g)).count();
    let means = fs::read_to_string(dir.path().join("out/report/means.csv")).unwrap();
    let images = |scope: &str| -> usize {
        let row = means.lines().find(|l| l.starts_with(&format!("{scope},MoR,"))).unwrap();
        row.split(',').nth(2).unwrap().parse().unwrap()
    };
    assert_eq!(images("all"), 6);
    assert_eq!(images("safe"), count("safe"));
    assert_eq!(images("unsafe"), count("unsafe"));
    assert!(count("ambiguous") > 0 || images("safe") + images("unsafe") == 6);
}
