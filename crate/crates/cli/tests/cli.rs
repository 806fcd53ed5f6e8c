use std::path::Path;
use std::process::{Command, Output};

use evfuse_core::events::{frames_from_records, read_stream};
use evfuse_core::report::{read_csv, BenchReport};
use evfuse_core::run::Sidecar;

fn evfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evfuse"))
        .current_dir(dir)
        .env_remove("EVFUSE_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn report(dir: &Path) -> BenchReport {
    BenchReport::from_json(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn sidecar(path: &Path) -> Sidecar {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn still_scene_has_no_events_after_the_first_frame() {
    let d = tempfile::tempdir().unwrap();
    ok(&evfuse(d.path(), &["synth", "--out", "still.evs", "--speed", "0", "--frames", "8", "--preset", "dvs128"]));
    let s = read_stream(&std::fs::read(d.path().join("still.evs")).unwrap()).unwrap();
    let frames = frames_from_records(&s.records, 128, 128, 10_000, 8).unwrap();
    assert!(frames[1..].iter().all(|f| f.total() == 0.0));
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let d = tempfile::tempdir().unwrap();
    for name in ["a.evs", "b.evs"] {
        ok(&evfuse(d.path(), &["synth", "--out", name, "--seed", "9", "--frames", "12"]));
    }
    let read = |n: &str| std::fs::read(d.path().join(n)).unwrap();
    assert_eq!(read("a.evs"), read("b.evs"));
    assert_eq!(read("a.truth.json"), read("b.truth.json"));
}

#[test]
fn sidecar_activity_recounts_to_the_target() {
    let d = tempfile::tempdir().unwrap();
    ok(&evfuse(d.path(), &["synth", "--out", "desk.evs", "--activity", "0.15"]));
    let s = sidecar(&d.path().join("desk.truth.json"));
    assert_eq!(s.num_patches, 196);
    let recount = s.ground_truth[1..].iter().map(Vec::len).sum::<usize>() as f64 / (s.frames - 1) as f64;
    assert!((23.0..=36.0).contains(&recount), "mean active patches {recount}");
    assert!((recount - s.mean_active_patches).abs() < 1e-9);
}

#[test]
fn identical_runs_write_identical_reports() {
    let d = tempfile::tempdir().unwrap();
    ok(&evfuse(d.path(), &["synth", "--out", "s.evs", "--preset", "dvs128", "--frames", "6"]));
    for out in ["r1", "r2"] {
        ok(&evfuse(d.path(), &["run", "--mode", "sttf", "--stream", "s.evs", "--out-dir", out]));
    }
    for f in ["report.json", "report.csv"] {
        let a = std::fs::read(d.path().join("r1").join(f)).unwrap();
        let b = std::fs::read(d.path().join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let r = report(&d.path().join("r1"));
    r.validate().unwrap();
    let csv = read_csv(std::fs::File::open(d.path().join("r1/report.csv")).unwrap()).unwrap();
    assert_eq!(csv, r.frames);
    assert!(d.path().join("r1/timing.json").exists());
}

#[test]
fn dense_baseline_encodes_all_196_patches() {
    let d = tempfile::tempdir().unwrap();
    ok(&evfuse(d.path(), &["run", "--mode", "dense-baseline", "--synth", "--frames", "4"]));
    let r = report(&d.path().join("out"));
    assert_eq!(r.frames.len(), 4);
    assert!(r.frames.iter().all(|f| f.active_tokens == 196));
}

#[test]
fn still_stream_spends_nothing_in_the_sparse_encoder() {
    let d = tempfile::tempdir().unwrap();
    ok(&evfuse(d.path(), &["run", "--mode", "sttf", "--synth", "--speed", "0", "--frames", "5", "--out-dir", "r"]));
    let r = report(&d.path().join("r"));
    assert!(r.frames[0].stages.get("sparse_encoder").copied().unwrap_or(0) > 0);
    for f in &r.frames[1..] {
        assert_eq!(f.stages.get("sparse_encoder").copied().unwrap_or(0), 0, "frame {}", f.frame);
        assert_eq!(f.active_tokens, 0);
    }
}

#[test]
fn sparse_stream_cuts_tokens_by_82_percent() {
    let d = tempfile::tempdir().unwrap();
    ok(&evfuse(d.path(), &["run", "--mode", "sttf", "--synth", "--activity", "0.15"]));
    let r = report(&d.path().join("out"));
    assert_eq!(r.frames.len(), 100);
    let mean = r.frames.iter().map(|f| f.active_tokens as f64).sum::<f64>() / 100.0;
    let reduction = 100.0 * (1.0 - mean / 196.0);
    assert!(reduction >= 82.0, "token reduction {reduction:.2}%");
    assert_eq!(r.aggregates.token_reduction_pct, reduction);
}

#[test]
fn out_dir_falls_back_to_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_evfuse"))
        .current_dir(d.path())
        .env("EVFUSE_OUT_DIR", "from-env")
        .args(["run", "--mode", "anc", "--synth", "--preset", "dvs128", "--frames", "2"])
        .output()
        .unwrap();
    ok(&out);
    assert!(d.path().join("from-env/report.json").exists());
}

#[test]
fn config_file_drives_a_run() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("run.toml"),
        "mode = \"anc\"\nseed = 4\nbudget = 0.5\nout_dir = \"cfg-out\"\n[synth]\npreset = \"dvs128\"\nframes = 3\n",
    )
    .unwrap();
    ok(&evfuse(d.path(), &["run", "--config", "run.toml"]));
    let r = report(&d.path().join("cfg-out"));
    assert_eq!((r.mode.as_str(), r.seed, r.frames.len()), ("anc", 4, 3));
    assert!(r.frames.iter().all(|f| f.routing_w.is_some()));
}

#[test]
fn configuration_errors_exit_with_2() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.toml"), "mode = \"sttf\"\nunknown_key = 1\n").unwrap();
    let cases: [&[&str]; 4] = [
        &["run", "--config", "bad.toml"],
        &["run", "--mode", "anc", "--synth", "--tau", "0.5"],
        &["run", "--mode", "sttf"],
        &["run", "--mode", "sttf", "--stream", "missing.evs", "--synth"],
    ];
    for args in cases {
        let out = evfuse(d.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn verify_passes_and_refuses_corrupt_checkpoints() {
    let d = tempfile::tempdir().unwrap();
    let out = evfuse(d.path(), &["verify"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("tolerance") && !text.contains("FAIL"));
    std::fs::write(d.path().join("bad.ckpt"), b"TGVM\x01\x00\x00\x00\xff").unwrap();
    let out = evfuse(d.path(), &["verify", "--checkpoint", "bad.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt"));
}

#[test]
fn train_writes_metrics_and_a_loadable_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    ok(&evfuse(d.path(), &["train", "--steps", "12", "--out-dir", "t"]));
    let metrics = std::fs::read_to_string(d.path().join("t/metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12);
    assert!(lines[0].get("total").is_some() && lines[0].get("token_l0_relaxed").is_some());
    assert!(d.path().join("t/eval.json").exists());
    ok(&evfuse(d.path(), &["verify", "--checkpoint", "t/model.ckpt"]));
}
