use std::path::{Path, PathBuf};
use std::process::Command;

use d2p_core::cli::{DatasetManifest, MANIFEST_FILE};
use d2p_core::config::PipelineConfig;

fn d2p(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_d2p")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, edit: impl FnOnce(&mut PipelineConfig)) -> PathBuf {
    let mut cfg = PipelineConfig::default();
    cfg.train.epochs = 1;
    cfg.generator.frame_count = 120;
    edit(&mut cfg);
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    path
}

fn first_episode(data: &Path) -> PathBuf {
    let mut files: Vec<PathBuf> = std::fs::read_dir(data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    files.remove(0)
}

#[test]
fn gen_dataset_writes_manifest_with_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let data = dir.path().join("data");
    let (code, err) = d2p(&[
        "gen-dataset",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&data),
        "--per-object",
        "1",
        "--seed",
        "3",
    ]);
    assert_eq!(code, 0, "{err}");
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(data.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.episodes.len(), 5);
    assert_eq!(manifest.seed, 3);
    for e in &manifest.episodes {
        let bytes = std::fs::read(data.join(&e.file)).unwrap();
        assert_eq!(d2p_core::cli::sha256_hex(&bytes), e.sha256);
    }
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("missing");
    let out = dir.path().join("out.json");
    let cases: [&[&str]; 4] = [
        &[
            "segment",
            "--model",
            s(&nowhere),
            "--episode",
            s(&nowhere),
            "--out",
            s(&out),
        ],
        &["train", "--data", s(&nowhere), "--out", s(&out)],
        &["execute", "--plan", s(&nowhere), "--out", s(&out)],
        &["render-timeline", "--timeline", s(&nowhere), "--out", s(&out)],
    ];
    for args in cases {
        let (code, err) = d2p(args);
        assert_eq!(code, 2, "{args:?}: {err}");
        assert!(err.starts_with("error:"), "{err}");
    }
}

#[test]
fn unknown_config_key_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochs = 1\nlearning_rate = 0.1\n").unwrap();
    let (code, err) = d2p(&[
        "gen-dataset",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn diverged_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |c| {
        c.train.lr = 1e200;
        c.train.grad_clip = None;
    });
    let data = dir.path().join("data");
    assert_eq!(
        d2p(&[
            "gen-dataset",
            "--config",
            s(&cfg),
            "--out-dir",
            s(&data),
            "--per-object",
            "1"
        ])
        .0,
        0
    );
    let (code, err) = d2p(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("m.bin")),
    ]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn plan_requesting_new_demonstration_cannot_be_executed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let data = dir.path().join("data");
    assert_eq!(
        d2p(&[
            "gen-dataset",
            "--config",
            s(&cfg),
            "--out-dir",
            s(&data),
            "--per-object",
            "1"
        ])
        .0,
        0
    );
    let ep = first_episode(&data);
    // Held while the hand is still at rest: no object near the hand.
    let frames = d2p_core::types::read_episode(&ep).unwrap().frame_count;
    let timeline = dir.path().join("early.json");
    let mut labels = vec![0u8; frames];
    labels[1] = 1;
    labels[2] = 1;
    std::fs::write(
        &timeline,
        serde_json::json!({ "episode_id": "early", "steps": "direct", "labels": labels }).to_string(),
    )
    .unwrap();
    let plan = dir.path().join("plan.json");
    let (code, err) = d2p(&[
        "plan",
        "--config",
        s(&cfg),
        "--episode",
        s(&ep),
        "--timeline",
        s(&timeline),
        "--out",
        s(&plan),
    ]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(&plan).unwrap();
    assert!(text.contains("request_new_demonstration"), "{text}");
    let (code, err) = d2p(&[
        "execute",
        "--config",
        s(&cfg),
        "--plan",
        s(&plan),
        "--out",
        s(&dir.path().join("x.json")),
    ]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn timeline_length_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let data = dir.path().join("data");
    assert_eq!(
        d2p(&[
            "gen-dataset",
            "--config",
            s(&cfg),
            "--out-dir",
            s(&data),
            "--per-object",
            "1"
        ])
        .0,
        0
    );
    let timeline = dir.path().join("short.json");
    std::fs::write(
        &timeline,
        serde_json::json!({ "episode_id": "x", "steps": "direct", "labels": [0, 1, 1, 0] }).to_string(),
    )
    .unwrap();
    let (code, _) = d2p(&[
        "plan",
        "--config",
        s(&cfg),
        "--episode",
        s(&first_episode(&data)),
        "--timeline",
        s(&timeline),
        "--out",
        s(&dir.path().join("p.json")),
    ]);
    assert_eq!(code, 2);
}
