//! End-to-end CLI tests on a miniature corpus and model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn specdec() -> Command {
    Command::new(env!("CARGO_BIN_EXE_specdec"))
}

struct MiniRun {
    dir: tempfile::TempDir,
    config: PathBuf,
}

/// A tiny but complete setup: corpus, prompts, and a config sized so the
/// whole train/bench cycle runs in seconds.
fn mini_setup() -> MiniRun {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    std::fs::create_dir_all(&corpus_dir).unwrap();
    let phrase = b"the copper finch nests near the old harbor wall at first light. ";
    let corpus: Vec<u8> = (0..40_000).map(|i| phrase[i % phrase.len()]).collect();
    std::fs::write(corpus_dir.join("mini.txt"), &corpus).unwrap();

    let prompts: Vec<String> = (0..3)
        .map(|i| String::from_utf8(corpus[i * 70..i * 70 + 24].to_vec()).unwrap())
        .collect();
    let prompts_file = dir.path().join("prompts.json");
    std::fs::write(&prompts_file, serde_json::to_string(&prompts).unwrap()).unwrap();

    let config = dir.path().join("mini.json");
    let json = serde_json::json!({
        "seed": 7,
        "paths": {
            "corpus_dir": corpus_dir,
            "checkpoint_dir": dir.path().join("ckpt"),
            "output_dir": dir.path().join("out"),
            "prompts_file": prompts_file
        },
        "target": {
            "vocab_size": 256, "d_model": 32, "n_layers": 2,
            "n_heads": 2, "max_seq_len": 96, "ff_mult": 2
        },
        "target_train": { "steps": 30, "batch_size": 2, "seq_len": 48, "learning_rate": 0.002 },
        "head": { "kind": "medusa", "k": 1, "medusa_heads": 3, "draft_len": 3 },
        "distill": { "num_windows": 8, "window_len": 48 },
        "train": {
            "lambda": 0.1, "g_steps": 1, "d_steps": 1,
            "lr_g": 0.001, "lr_d": 0.001,
            "max_epochs": 2, "nash_window": 2,
            "nash_low": 0.45, "nash_high": 0.55,
            "batch_size": 8, "batches_per_epoch": 4
        },
        "bench": { "max_new": 12, "temperature": 0.0, "repetitions": 2 }
    });
    std::fs::write(&config, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    MiniRun { dir, config }
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missing_corpus_dir_exits_2_naming_the_path() {
    let setup = mini_setup();
    let bad = setup.dir.path().join("bad.json");
    let text = std::fs::read_to_string(&setup.config)
        .unwrap()
        .replace("corpus", "corpus-missing");
    std::fs::write(&bad, text).unwrap();
    let out = run(specdec().args(["train-target", "--config"]).arg(&bad));
    assert_code(&out, 2);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("corpus-missing"),
        "stderr must name the missing path"
    );
}

#[test]
fn unknown_config_key_exits_2_with_json_path() {
    let setup = mini_setup();
    let bad = setup.dir.path().join("bad.json");
    let text = std::fs::read_to_string(&setup.config)
        .unwrap()
        .replace("\"max_new\": 12", "\"max_new\": 12, \"surprise\": 1");
    std::fs::write(&bad, text).unwrap();
    let out = run(specdec().args(["train-target", "--config"]).arg(&bad));
    assert_code(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("surprise") && err.contains("bench"), "{err}");
}

#[test]
fn k_outside_grid_needs_override() {
    let setup = mini_setup();
    let out = run(specdec()
        .args(["train-head", "--kind", "medusa", "--k", "5", "--adversarial", "off", "--config"])
        .arg(&setup.config));
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("allow-any-k"));
}

#[test]
fn bench_without_checkpoints_reports_missing() {
    let setup = mini_setup();
    // train the target so bench can start, then request a cell that was
    // never trained
    let out = run(specdec().args(["train-target", "--config"]).arg(&setup.config));
    assert_code(&out, 0);
    let out = run(specdec()
        .args(["bench", "--cell", "kind=eagle,k=3,al=on", "--config"])
        .arg(&setup.config));
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("missing"));
}

#[test]
fn full_mini_pipeline_and_determinism() {
    let setup = mini_setup();

    // train target twice: byte-identical checkpoints
    let out = run(specdec().args(["train-target", "--config"]).arg(&setup.config));
    assert_code(&out, 0);
    let ckpt = setup.dir.path().join("ckpt/target.ckpt");
    let first = std::fs::read(&ckpt).unwrap();
    let out = run(specdec().args(["train-target", "--config"]).arg(&setup.config));
    assert_code(&out, 0);
    assert_eq!(first, std::fs::read(&ckpt).unwrap(), "same seed, same bytes");

    // train a medusa head without and an eagle head with adversarial learning
    let out = run(specdec()
        .args(["train-head", "--kind", "medusa", "--k", "1", "--adversarial", "off", "--config"])
        .arg(&setup.config));
    assert_code(&out, 0);
    let head_ckpt = setup.dir.path().join("ckpt/head-medusa-k1-aloff.ckpt");
    assert!(head_ckpt.is_file());
    let first_head = std::fs::read(&head_ckpt).unwrap();
    let out = run(specdec()
        .args(["train-head", "--kind", "medusa", "--k", "1", "--adversarial", "off", "--config"])
        .arg(&setup.config));
    assert_code(&out, 0);
    assert_eq!(first_head, std::fs::read(&head_ckpt).unwrap(), "head training deterministic");

    let out = run(specdec()
        .args(["train-head", "--kind", "eagle", "--k", "1", "--adversarial", "on", "--config"])
        .arg(&setup.config));
    assert_code(&out, 0);
    assert!(setup.dir.path().join("ckpt/head-eagle-k1-alon.ckpt").is_file());
    assert!(setup.dir.path().join("ckpt/disc-eagle-k1.ckpt").is_file());
    let report = std::fs::read_to_string(setup.dir.path().join("out/train-eagle-k1-alon.jsonl")).unwrap();
    let last = report.lines().last().unwrap();
    assert!(last.contains("stop_criterion"), "report ends with a stop criterion: {last}");

    // bench one trained cell
    let out = run(specdec()
        .args(["bench", "--cell", "kind=medusa,k=1,al=off", "--config"])
        .arg(&setup.config));
    assert_code(&out, 0);
    let csv = std::fs::read_to_string(setup.dir.path().join("out/bench-cell-t0.csv")).unwrap();
    assert!(csv.lines().count() >= 3, "baseline + cell + best-k rows:\n{csv}");
    assert!(csv.contains("vanilla"));
    assert!(Path::new(&setup.dir.path().join("out/bench-cell-t0.json")).is_file());
}

#[test]
fn verify_oracles_passes() {
    let out = run(specdec().arg("verify-oracles"));
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for suite in ["gradcheck", "losslessness", "greedy_equivalence", "loss_anchors"] {
        assert!(stdout.contains(suite), "missing suite {suite} in:\n{stdout}");
    }
    assert!(!stdout.contains("FAIL"));
}
