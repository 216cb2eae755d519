use std::path::Path;
use std::process::Command;

use redbert_cli::{parse_config, run, EXIT_FAILURE, EXIT_USAGE};

fn redbert(args: &[&str]) -> i32 {
    run(std::iter::once("redbert").chain(args.iter().copied()))
}

fn config_value(run_dir: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(run_dir.join("config.txt")).unwrap();
    parse_config(&text, "config.txt")
        .unwrap()
        .into_iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .unwrap()
}

const SMALL_CORPUS: &[&str] = &[
    "--num-docs",
    "24",
    "--examples-per-task",
    "12",
    "--test-examples",
    "6",
    "--dep-dim",
    "8",
];

const TINY_MODEL: &[&str] = &[
    "--layers", "1", "--hidden", "16", "--heads", "2", "--ff", "32", "--max-len", "24", "--max-epochs", "1",
    "--lr", "1e-3", "--batch-size", "8", "--dropout", "0",
];

fn gen_corpus(root: &Path, name: &str) -> std::path::PathBuf {
    let root = root.to_str().unwrap();
    let mut args = vec!["gen-corpus", "--out-root", root, "--run-name", name];
    args.extend_from_slice(SMALL_CORPUS);
    assert_eq!(redbert(&args), 0);
    Path::new(root).join(name)
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(redbert(&["--help"]), 0);
    assert_eq!(redbert(&["pretrain", "--help"]), 0);
    assert_eq!(redbert(&[]), EXIT_USAGE);
    assert_eq!(redbert(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(redbert(&["gen-corpus", "--no-such-flag", "1"]), EXIT_USAGE);
    assert_eq!(redbert(&["gen-corpus", "--config", "/definitely/missing.txt"]), EXIT_USAGE);
}

#[test]
fn missing_input_file_is_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let code = redbert(&[
        "finetune",
        "--out-root",
        root,
        "--task",
        "intent",
        "--data",
        "/definitely/missing.jsonl",
        "--vocab",
        "/definitely/missing.txt",
    ]);
    assert_eq!(code, EXIT_FAILURE);
}

#[test]
fn bad_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    assert_eq!(redbert(&["gen-corpus", "--out-root", root, "--num-docs", "many"]), EXIT_USAGE);
    assert_eq!(redbert(&["gen-corpus", "--out-root", root, "--chat-fraction", "2"]), EXIT_USAGE);
    assert_eq!(redbert(&["finetune", "--out-root", root, "--task", "poetry", "--data", "x"]), EXIT_USAGE);
}

#[test]
fn gen_corpus_writes_manifest_config_and_data() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = gen_corpus(dir.path(), "corpus");
    for f in ["manifest.json", "config.txt", "metrics.csv", "vocab.txt", "deps.vec", "corpus_train.jsonl"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    for task in ["intent", "sentiment", "ner", "title_compression", "proactive"] {
        assert!(run_dir.join(format!("tasks/train/{task}.jsonl")).is_file(), "{task}");
        assert!(run_dir.join(format!("tasks/test/{task}.jsonl")).is_file(), "{task}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-corpus");
    assert_eq!(manifest["config"]["num_docs"], "24");
    assert_eq!(manifest["seed"], "0");
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.contains("documents,24\n"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("settings.txt");
    std::fs::write(&cfg, "# small\nnum_docs=30\nchat-fraction = 0.5\nexamples_per_task=4\ntest_examples=2\ndep_dim=4\n").unwrap();
    let root = dir.path().to_str().unwrap();
    let code = redbert(&[
        "gen-corpus",
        "--config",
        cfg.to_str().unwrap(),
        "--out-root",
        root,
        "--run-name",
        "mixed",
        "--num-docs",
        "20",
    ]);
    assert_eq!(code, 0);
    let run_dir = dir.path().join("mixed");
    assert_eq!(config_value(&run_dir, "num_docs"), "20");
    assert_eq!(config_value(&run_dir, "chat_fraction"), "0.5");
    assert_eq!(config_value(&run_dir, "train_fraction"), "0.9");
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("settings.txt");
    std::fs::write(&cfg, "num_docs=3\nlearning_rate=1\n").unwrap();
    let root = dir.path().to_str().unwrap();
    assert_eq!(redbert(&["gen-corpus", "--config", cfg.to_str().unwrap(), "--out-root", root]), EXIT_USAGE);
    std::fs::write(&cfg, "just words\n").unwrap();
    assert_eq!(redbert(&["gen-corpus", "--config", cfg.to_str().unwrap(), "--out-root", root]), EXIT_USAGE);
}

#[test]
fn run_dir_env_var_ranks_below_config_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (env_root, cfg_root, flag_root) = (dir.path().join("env"), dir.path().join("cfg"), dir.path().join("flag"));
    let cfg = dir.path().join("settings.txt");
    std::fs::write(&cfg, format!("out_root={}\n", cfg_root.display())).unwrap();
    let launch = |extra: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_redbert"))
            .args(["gen-corpus", "--run-name", "r"])
            .args(SMALL_CORPUS)
            .args(extra)
            .env("REDBERT_RUN_DIR", &env_root)
            .output()
            .unwrap()
    };
    assert!(launch(&[]).status.success());
    assert!(env_root.join("r/manifest.json").is_file());

    assert!(launch(&["--config", cfg.to_str().unwrap()]).status.success());
    assert!(cfg_root.join("r/manifest.json").is_file());

    let out = launch(&["--config", cfg.to_str().unwrap(), "--out-root", flag_root.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(flag_root.join("r/manifest.json").is_file());
}

#[test]
fn binary_reports_usage_exit_status() {
    let out = Command::new(env!("CARGO_BIN_EXE_redbert")).arg("--bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(!out.stderr.is_empty());
}

#[test]
fn full_pipeline_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_corpus(dir.path(), "corpus");
    let root = dir.path().to_str().unwrap();
    let (corpus, vocab, deps) = (
        data.join("corpus_train.jsonl"),
        data.join("vocab.txt"),
        data.join("deps.vec"),
    );

    let mut args = vec![
        "pretrain",
        "--out-root",
        root,
        "--run-name",
        "pre",
        "--corpus",
        corpus.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--inject-deps",
        "--dep-vectors",
        deps.to_str().unwrap(),
        "--dep-dim",
        "8",
        "--dep-heads",
        "2",
        "--dep-ff",
        "16",
    ];
    args.extend_from_slice(TINY_MODEL);
    assert_eq!(redbert(&args), 0);
    let pre = dir.path().join("pre");
    assert!(pre.join("model.bin").is_file());
    let metrics = std::fs::read_to_string(pre.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,split,loss,f1\n"));

    let (train, test) = (data.join("tasks/train/ner.jsonl"), data.join("tasks/test/ner.jsonl"));
    let pre_model = pre.join("model.bin");
    let mut args = vec![
        "finetune",
        "--out-root",
        root,
        "--run-name",
        "ft",
        "--task",
        "ner",
        "--data",
        train.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--checkpoint",
        pre_model.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY_MODEL);
    assert_eq!(redbert(&args), 0);
    let ft = dir.path().join("ft");
    for f in ["model.bin", "metrics.csv", "report.csv", "test_report.csv"] {
        assert!(ft.join(f).is_file(), "{f}");
    }

    let code = redbert(&[
        "eval",
        "--out-root",
        root,
        "--run-name",
        "ev",
        "--checkpoint",
        ft.join("model.bin").to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
        "--labels",
        data.join("tasks/train/ner.labels").to_str().unwrap(),
        "--batch-size",
        "8",
    ]);
    assert_eq!(code, 0);
    let eval_metrics = std::fs::read_to_string(dir.path().join("ev/metrics.csv")).unwrap();
    let test_line = |text: &str| text.lines().find(|l| l.contains(",test,")).unwrap().to_string();
    let ft_metrics = std::fs::read_to_string(ft.join("metrics.csv")).unwrap();
    // Same model, same data: the same loss and F1 as the post-training score.
    assert_eq!(
        test_line(&eval_metrics).split_once(",test,").unwrap().1,
        test_line(&ft_metrics).split_once(",test,").unwrap().1
    );

    let code = redbert(&[
        "project",
        "--out-root",
        root,
        "--run-name",
        "proj",
        "--sentence",
        "add milk to my cart",
        "--model-a",
        pre.join("model.bin").to_str().unwrap(),
        "--model-b",
        ft.join("model.bin").to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    for f in ["projection.svg", "projection.csv", "projection_distances.csv", "metrics.csv"] {
        assert!(dir.path().join("proj").join(f).is_file(), "{f}");
    }

    let code = redbert(&[
        "finetune",
        "--config",
        ft.join("config.txt").to_str().unwrap(),
        "--run-name",
        "ft-replay",
    ]);
    assert_eq!(code, 0);
    let replay = std::fs::read(dir.path().join("ft-replay/metrics.csv")).unwrap();
    assert_eq!(replay, std::fs::read(ft.join("metrics.csv")).unwrap());
}
