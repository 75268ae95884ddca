//! Behavior of the `posekit` binary: determinism, exit codes, directory
//! processing, and exact parity with the in-process library calls.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use posekit::augmotion::{canonical_reference_targets, harmonize_sequence, select_key_frame};
use posekit::heatpose::{decode, read_volumes};
use posekit::ingest::{read_canonical, write_document, CanonicalDocument};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_posekit"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> (i32, serde_json::Value) {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        !out.status.success(),
        "command {args:?} unexpectedly passed"
    );
    let code = out.status.code().expect("exit code");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let envelope: serde_json::Value = serde_json::from_str(stderr.trim())
        .unwrap_or_else(|_| panic!("stderr is not a JSON envelope: {stderr}"));
    (code, envelope)
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn synth(dir: &Path, name: &str, seed: &str, frames: &str) -> PathBuf {
    let out = dir.join(name);
    run_ok(&[
        "synth",
        "--seed",
        seed,
        "--frames",
        frames,
        "-o",
        path_str(&out),
    ]);
    out
}

#[test]
fn synth_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.json", "3", "12");
    let b = synth(dir.path(), "b.json", "3", "12");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn harmonize_matches_the_library_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path(), "in.json", "0", "8");
    let output = dir.path().join("out.json");
    run_ok(&[
        "harmonize",
        path_str(&input),
        "-o",
        path_str(&output),
        "--seed",
        "0",
    ]);

    let seq = read_canonical(&input).unwrap();
    let key = select_key_frame(&seq, 0).unwrap();
    let expected = harmonize_sequence(&seq, key.frame_index, &canonical_reference_targets())
        .unwrap()
        .sequence;

    let got = read_canonical(&output).unwrap();
    assert_eq!(got.frames.len(), expected.frames.len());
    for (f, g) in expected.frames.iter().zip(&got.frames) {
        for (p, q) in f.coords.iter().zip(&g.coords) {
            assert_eq!(p.x.to_bits(), q.x.to_bits());
            assert_eq!(p.y.to_bits(), q.y.to_bits());
            assert_eq!(p.z.to_bits(), q.z.to_bits());
        }
    }
    assert!(output.with_extension("transform.json").exists());
}

#[test]
fn decode_matches_the_library_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path(), "in.json", "1", "3");
    let harmonized = dir.path().join("h.json");
    run_ok(&["harmonize", path_str(&input), "-o", path_str(&harmonized)]);
    let vol = dir.path().join("v.vol");
    run_ok(&[
        "encode",
        path_str(&harmonized),
        "-o",
        path_str(&vol),
        "--dims",
        "16x16x16",
    ]);
    let decoded = dir.path().join("d.json");
    run_ok(&["decode", path_str(&vol), "-o", path_str(&decoded)]);

    let (volumes, _) = read_volumes(&vol).unwrap();
    let got = read_canonical(&decoded).unwrap();
    for (volume, frame) in volumes.iter().zip(&got.frames) {
        let expected = decode(volume).unwrap();
        for (p, q) in expected.iter().zip(&frame.coords) {
            assert_eq!(p.x.to_bits(), q.x.to_bits());
            assert_eq!(p.y.to_bits(), q.y.to_bits());
            assert_eq!(p.z.to_bits(), q.z.to_bits());
        }
    }
}

#[test]
fn directory_inputs_process_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let in_dir = dir.path().join("in");
    std::fs::create_dir(&in_dir).unwrap();
    synth(&in_dir, "a.json", "0", "4");
    synth(&in_dir, "b.json", "1", "4");
    let out_dir = dir.path().join("out");
    let out = run_ok(&["harmonize", path_str(&in_dir), "-o", path_str(&out_dir)]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).expect("summary is JSON");
    assert_eq!(summary.as_array().unwrap().len(), 2);
    assert!(out_dir.join("a.json").exists());
    assert!(out_dir.join("b.json").exists());
    assert!(out_dir.join("a.transform.json").exists());
}

#[test]
fn windows_reports_the_expected_starts() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path(), "w.json", "0", "64");
    let out = run_ok(&[
        "windows",
        path_str(&input),
        "--window-len",
        "16",
        "--step",
        "16",
    ]);
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(value["count"], 4);
    let starts: Vec<u64> = value["windows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| w["start_frame"].as_u64().unwrap())
        .collect();
    assert_eq!(starts, vec![0, 16, 32, 48]);
}

#[test]
fn keyframe_prints_the_selection() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path(), "k.json", "0", "6");
    let out = run_ok(&["keyframe", path_str(&input)]);
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(value["frame_index"].is_u64());
    assert_eq!(value["feature_values"].as_array().unwrap().len(), 6);
    assert_eq!(value["cluster_sizes"].as_array().unwrap().len(), 3);
}

#[test]
fn keyframe_of_a_harmonized_drift_free_walk_sits_on_the_targets() {
    // Drift and lean off: every frame shares one reference-triple pose, so
    // whichever frame the second selection picks, its triple must sit on
    // the universal targets.
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.json");
    run_ok(&[
        "synth",
        "--seed",
        "0",
        "--frames",
        "24",
        "--drift",
        "0,0,0",
        "--lean-deg",
        "0",
        "-o",
        path_str(&raw),
    ]);
    let harmonized = dir.path().join("uni.json");
    run_ok(&["harmonize", path_str(&raw), "-o", path_str(&harmonized)]);
    let out = run_ok(&["keyframe", path_str(&harmonized)]);
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let key = value["frame_index"].as_u64().unwrap() as usize;

    let seq = read_canonical(&harmonized).unwrap();
    let triple = seq.topology.reference_triple().unwrap();
    let frame = &seq.frames[key];
    let targets = canonical_reference_targets();
    for (joint, target) in [
        (triple.left_shoulder, targets[0]),
        (triple.right_shoulder, targets[1]),
        (triple.pubis, targets[2]),
    ] {
        let gap = (frame.coords[joint.0] - target).norm();
        assert!(gap < 1e-6, "triple joint off target by {gap}");
    }
}

#[test]
fn missing_file_exits_3_with_json_envelope() {
    let (code, envelope) = run_err(&["keyframe", "/no/such/file.json"]);
    assert_eq!(code, 3);
    assert_eq!(envelope["error"]["code"], 3);
}

#[test]
fn config_violations_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path(), "c.json", "0", "4");
    let vol = dir.path().join("c.vol");
    let (code, _) = run_err(&[
        "encode",
        path_str(&input),
        "-o",
        path_str(&vol),
        "--dims",
        "64x64",
    ]);
    assert_eq!(code, 4);

    let (code, envelope) = run_err(&["synth", "--frames", "0", "-o", path_str(&vol)]);
    assert_eq!(code, 4);
    assert_eq!(envelope["error"]["kind"], "config");
}

#[test]
fn invalid_data_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path(), "v.json", "0", "4");
    let seq = read_canonical(&input).unwrap();
    let mut doc = CanonicalDocument::from_sequence(&seq);
    doc.schema_version = 99;
    let bad = dir.path().join("bad.json");
    write_document(&doc, &bad).unwrap();
    let (code, envelope) = run_err(&["keyframe", path_str(&bad)]);
    assert_eq!(code, 5);
    assert_eq!(envelope["error"]["kind"], "ingest");
}

#[test]
fn degenerate_geometry_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path(), "d.json", "0", "2");
    let seq = read_canonical(&input).unwrap();
    let mut doc = CanonicalDocument::from_sequence(&seq);
    // Collapse the shoulders onto each other in every frame.
    for frame in &mut doc.frames {
        frame[14] = frame[11];
    }
    let bad = dir.path().join("flat.json");
    write_document(&doc, &bad).unwrap();
    let (code, _) = run_err(&[
        "harmonize",
        path_str(&bad),
        "-o",
        path_str(&dir.path().join("x.json")),
    ]);
    assert_eq!(code, 6);
}

#[test]
fn unknown_flag_exits_2() {
    let out = bin().args(["synth", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_rejects_mismatched_units() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth(dir.path(), "raw.json", "0", "4");
    let harmonized = dir.path().join("h.json");
    run_ok(&["harmonize", path_str(&raw), "-o", path_str(&harmonized)]);
    let (code, envelope) = run_err(&[
        "eval",
        "--pred",
        path_str(&raw),
        "--gt",
        path_str(&harmonized),
    ]);
    assert_eq!(code, 5);
    assert!(envelope["error"]["message"]
        .as_str()
        .unwrap()
        .contains("units"));
}

#[test]
fn selftests_pass_and_print_reports() {
    for suite in ["attn-selftest", "kabsch-selftest"] {
        let out = run_ok(&[suite]);
        let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(value["ok"], true, "{suite} not ok: {value}");
        assert!(!value["checks"].as_array().unwrap().is_empty());
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"seed": 5}"#).unwrap();

    let from_config = dir.path().join("cfg_out.json");
    run_ok(&[
        "synth",
        "--frames",
        "4",
        "--config",
        path_str(&config),
        "-o",
        path_str(&from_config),
    ]);
    let with_flag = dir.path().join("flag_out.json");
    run_ok(&[
        "synth",
        "--frames",
        "4",
        "--config",
        path_str(&config),
        "--seed",
        "7",
        "-o",
        path_str(&with_flag),
    ]);
    let plain5 = synth(dir.path(), "plain5.json", "5", "4");
    let plain7 = synth(dir.path(), "plain7.json", "7", "4");

    // Provenance echoes the resolved config, so compare coordinates.
    let coords = |p: &Path| {
        read_canonical(p)
            .unwrap()
            .frames
            .iter()
            .flat_map(|f| {
                f.coords
                    .iter()
                    .map(|q| (q.x.to_bits(), q.y.to_bits(), q.z.to_bits()))
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(coords(&from_config), coords(&plain5));
    assert_eq!(coords(&with_flag), coords(&plain7));
}

#[test]
fn dump_csv_writes_peak_slices() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path(), "s.json", "0", "2");
    let harmonized = dir.path().join("h.json");
    run_ok(&["harmonize", path_str(&input), "-o", path_str(&harmonized)]);
    let vol = dir.path().join("s.vol");
    let csv = dir.path().join("s.csv");
    run_ok(&[
        "encode",
        path_str(&harmonized),
        "-o",
        path_str(&vol),
        "--dims",
        "16x16x16",
        "--dump-csv",
        path_str(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("channel,joint,iz,iy,ix,value"));
    // 17 channels, one 16x16 slice each.
    assert_eq!(text.lines().count(), 1 + 17 * 16 * 16);
}

#[test]
fn fused_mode_encodes_one_channel_and_refuses_decode() {
    let dir = tempfile::tempdir().unwrap();
    let input = synth(dir.path(), "f.json", "0", "2");
    let harmonized = dir.path().join("h.json");
    run_ok(&["harmonize", path_str(&input), "-o", path_str(&harmonized)]);
    let vol = dir.path().join("f.vol");
    run_ok(&[
        "encode",
        path_str(&harmonized),
        "-o",
        path_str(&vol),
        "--dims",
        "16x16x16",
        "--mode",
        "fused",
    ]);
    let (volumes, header) = read_volumes(&vol).unwrap();
    assert_eq!(header.channels_per_frame, 1);
    assert_eq!(volumes[0].channel_count(), 1);
    let (code, _) = run_err(&[
        "decode",
        path_str(&vol),
        "-o",
        path_str(&dir.path().join("out.json")),
    ]);
    assert_eq!(code, 5);
}

#[test]
fn binary_pose_variant_round_trips_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let bin_pose = dir.path().join("s.posebin");
    run_ok(&[
        "synth",
        "--seed",
        "2",
        "--frames",
        "5",
        "-o",
        path_str(&bin_pose),
    ]);
    let json_pose = synth(dir.path(), "s.json", "2", "5");
    let a = read_canonical(&bin_pose).unwrap();
    let b = read_canonical(&json_pose).unwrap();
    assert_eq!(a.frames, b.frames);
}
