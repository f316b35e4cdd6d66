use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bridgekit::grid::load_grid;
use bridgekit::metrics::EvalReport;
use bridgekit_cli::RunConfig;

const SMALL: &[&str] = &[
    "grid.pairs=4",
    "vqvae.stage1_steps=12",
    "vqvae.stage2_steps=6",
    "vqvae.batch_size=4",
    "bridge.steps=8",
    "bridge.batch_size=4",
    "denoiser.base_width=8",
    "denoiser.time_dim=16",
    "metrics.surface_points=300",
    "run.checkpoint_every=5",
    "run.print_every=0",
];

fn bridgekit(run: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bridgekit"));
    cmd.args(args).arg("--run-dir").arg(run).env_remove("BRIDGEKIT_SEED");
    cmd.output().unwrap()
}

fn ok(run: &Path, args: &[&str]) -> String {
    let out = bridgekit(run, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(run: &Path, args: &[&str]) -> i32 {
    bridgekit(run, args).status.code().unwrap()
}

fn init(run: &Path) {
    let mut args = vec!["init"];
    for s in SMALL {
        args.extend(["--set", s]);
    }
    ok(run, &args);
}

fn pipeline(run: &Path) {
    init(run);
    ok(run, &["gen"]);
    ok(run, &["train-vqvae", "--stage", "1"]);
    ok(run, &["train-vqvae", "--stage", "2"]);
    ok(run, &["train-bridge"]);
}

#[test]
fn smoke_pipeline_emits_report_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    pipeline(run);
    ok(run, &["eval"]);
    let text = fs::read_to_string(run.join("eval/report.json")).unwrap();
    let report: EvalReport = serde_json::from_str(&text).unwrap();
    let cfg = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(report.config.fingerprint.as_deref(), Some(cfg.fingerprint().as_str()));
    assert_eq!(report.shapes.len(), 4);
    assert!(report.baseline.is_some());

    let other = run.join("again.json");
    ok(run, &["eval", "--output", other.to_str().unwrap()]);
    assert_eq!(fs::read(&other).unwrap(), text.as_bytes());

    let partial = run.join("corpus/shape_0001_partial.vgrd");
    let (a, b) = (run.join("a.vgrd"), run.join("b.vgrd"));
    for out in [&a, &b] {
        let args = [
            "complete",
            "--deterministic",
            "--seed",
            "9",
            "--input",
            partial.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ];
        ok(run, &args);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(load_grid(&a).unwrap().dims(), [16; 3]);
    let stamp = fs::read_to_string(run.join("a.vgrd.stamp.json")).unwrap();
    assert!(stamp.contains(&cfg.fingerprint()));

    ok(run, &["complete"]);
    ok(run, &["mesh"]);
    let obj = fs::read_to_string(run.join("meshes/shape_0000.obj")).unwrap();
    assert!(obj.starts_with(&format!("# fingerprint {}\n", cfg.fingerprint())));
    let logs = fs::read_to_string(run.join("logs/bridge.jsonl")).unwrap();
    let steps = logs.lines().filter(|l| l.contains("\"eps\"")).count();
    assert_eq!(steps, 8);
}

#[test]
fn ordering_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    init(run);
    assert_eq!(code(run, &["train-bridge"]), 3);
    ok(run, &["gen"]);
    assert_eq!(code(run, &["train-bridge"]), 3);
    assert_eq!(code(run, &["train-vqvae", "--stage", "2"]), 3);
    assert_eq!(code(run, &["complete"]), 3);
    assert_eq!(code(run, &["eval"]), 3);
    assert_eq!(code(run, &["mesh"]), 3);
    ok(run, &["train-vqvae", "--stage", "1", "--max-steps", "3"]);
    // stage one is paused, not finished
    assert_eq!(code(run, &["train-vqvae", "--stage", "2"]), 3);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    assert_eq!(code(run, &["gen"]), 2);
    assert_eq!(code(run, &["init", "--set", "vqvae.nope=1"]), 2);
    assert_eq!(code(run, &["init", "--set", "views.patch=3"]), 2);
    assert_eq!(code(run, &["init", "--set", "bridge.infer_steps=0"]), 2);
    assert_eq!(code(run, &["train-vqvae", "--stage", "3"]), 2);
    let bad = run.join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "extra": true}"#).unwrap();
    assert_eq!(code(run, &["init", "--config", bad.to_str().unwrap()]), 2);
    init(run);
    assert_eq!(code(run, &["gen", "--set", "seed=99"]), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_bridgekit"))
        .args(["gen", "--run-dir"])
        .arg(run)
        .env("BRIDGEKIT_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    ok(run, &["gen", "--set", "run.checkpoint_every=3"]);
}

#[test]
fn io_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    assert_eq!(code(run, &["init", "--config", "/nonexistent/cfg.json"]), 4);
    init(run);
    fs::write(run.join("run.lock"), "1").unwrap();
    assert_eq!(code(run, &["gen"]), 4);
    fs::remove_file(run.join("run.lock")).unwrap();
    ok(run, &["gen"]);
    fs::write(run.join("corpus/shape_0000_partial.vgrd"), b"junk").unwrap();
    assert_eq!(code(run, &["train-vqvae", "--stage", "1"]), 4);
    let missing = run.join("none.vgrd");
    let out = run.join("m.obj");
    assert_eq!(
        code(
            run,
            &[
                "mesh",
                "--input",
                missing.to_str().unwrap(),
                "--output",
                out.to_str().unwrap()
            ]
        ),
        4
    );
}

#[test]
fn checkpoint_fingerprint_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    init(run);
    ok(run, &["gen"]);
    ok(run, &["train-vqvae", "--stage", "1", "--max-steps", "2"]);
    // rebinding the run to a new config leaves the old checkpoint behind
    ok(run, &["init", "--set", "vqvae.lr=0.001", "--force"]);
    assert_eq!(code(run, &["train-vqvae", "--stage", "1"]), 2);
    ok(run, &["train-vqvae", "--stage", "1", "--force"]);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());

    let run = b.path();
    init(run);
    ok(run, &["gen"]);
    for _ in 0..3 {
        ok(run, &["train-vqvae", "--stage", "1", "--max-steps", "5"]);
    }
    ok(run, &["train-vqvae", "--stage", "2", "--max-steps", "4"]);
    ok(run, &["train-vqvae", "--stage", "2"]);
    ok(run, &["train-bridge", "--max-steps", "3"]);
    ok(run, &["train-bridge"]);

    for stage in ["vqvae_stage1", "vqvae_stage2", "bridge"] {
        let p = format!("checkpoints/{stage}.ckpt");
        assert_eq!(
            fs::read(a.path().join(&p)).unwrap(),
            fs::read(run.join(&p)).unwrap(),
            "{stage} differs after resuming"
        );
        let losses = |root: &Path| -> Vec<String> {
            fs::read_to_string(root.join(format!("logs/{stage}.jsonl")))
                .unwrap()
                .lines()
                .filter(|l| l.contains("\"step\"") && !l.contains("\"event\""))
                .map(|l| {
                    let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                    v.as_object_mut().unwrap().remove("wall_s");
                    v.to_string()
                })
                .collect()
        };
        assert_eq!(losses(a.path()), losses(run));
    }
}
