use std::path::Path;
use std::process::{Command, Output};

fn glitter(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glitter"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "n_way = 3\nk_shot = 2\nq_query = 4\nepochs = 4\neta = 2\n\
setting = \"single-graph-disjoint-label\"\nsplit_train = 0.5\nsplit_val = 0.2\nsplit_test = 0.3\n";

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = glitter(
        &[
            "generate",
            "--set",
            "nodes_per_class=12",
            "--set",
            "feature_dim=4",
            "--out",
            "data",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn defaults_are_printed() {
    let dir = tempfile::tempdir().unwrap();
    let o = glitter(&["config", "--defaults"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for line in [
        "h = 2",
        "c = 10",
        "m = 2",
        "eta = 20",
        "alpha = 0.1",
        "beta1 = 0.005",
        "beta2 = 0.005",
        "hidden_dim = 16",
        "dropout_rate = 0.5",
    ] {
        assert!(
            text.lines().any(|l| l == line),
            "missing `{line}` in\n{text}"
        );
    }
}

#[test]
fn bad_invocations_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = glitter(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(
        glitter(&["verify", "--suite", "nonsense"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        glitter(&["train", "--data", "d"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = workspace();
    let o = glitter(
        &[
            "train",
            "--config",
            "small.toml",
            "--set",
            "bogus=1",
            "--data",
            "data",
            "--out",
            "m.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn invalid_values_fail_validation() {
    let dir = workspace();
    let o = glitter(
        &[
            "train",
            "--config",
            "small.toml",
            "--set",
            "n_way=1",
            "--data",
            "data",
            "--out",
            "m.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_evaluate_and_baselines_round_trip() {
    let dir = workspace();
    let p = dir.path();
    let train = |out: &str| {
        glitter(
            &[
                "train",
                "--config",
                "small.toml",
                "--seed",
                "4",
                "--data",
                "data",
                "--out",
                out,
                "--log",
                "log.jsonl",
            ],
            p,
        )
    };
    let o = train("a.ckpt");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("seed = 4"));
    assert!(train("b.ckpt").status.success());
    assert_eq!(
        std::fs::read(p.join("a.ckpt")).unwrap(),
        std::fs::read(p.join("b.ckpt")).unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(p.join("log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        5
    );

    let eval = |report: &str| {
        glitter(
            &[
                "evaluate",
                "--checkpoint",
                "a.ckpt",
                "--data",
                "data",
                "--reps",
                "2",
                "--episodes",
                "3",
                "--report",
                report,
            ],
            p,
        )
    };
    assert!(eval("r1.json").status.success());
    assert!(eval("r2.json").status.success());
    let r1 = std::fs::read_to_string(p.join("r1.json")).unwrap();
    assert_eq!(r1, std::fs::read_to_string(p.join("r2.json")).unwrap());
    let report: serde_json::Value = serde_json::from_str(&r1).unwrap();
    assert_eq!(report["model"], "glitter");
    assert_eq!(
        report["per_repetition_accuracy"].as_array().unwrap().len(),
        2
    );

    for model in ["knn", "protonet"] {
        let o = glitter(
            &[
                "baseline",
                "--model",
                model,
                "--config",
                "small.toml",
                "--seed",
                "4",
                "--data",
                "data",
                "--reps",
                "2",
                "--episodes",
                "3",
            ],
            p,
        );
        assert!(
            o.status.success(),
            "{model}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(stdout(&o).contains(&format!("\"model\":\"{model}\"")));
    }
}

#[test]
fn evaluating_with_a_different_width_fails() {
    let dir = workspace();
    let p = dir.path();
    assert!(glitter(
        &[
            "train",
            "--config",
            "small.toml",
            "--data",
            "data",
            "--out",
            "m.ckpt"
        ],
        p
    )
    .status
    .success());
    let o = glitter(
        &[
            "evaluate",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "data",
            "--set",
            "hidden_dim=32",
            "--reps",
            "1",
            "--episodes",
            "1",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema"));
}

#[test]
fn verify_suites_report_each_check() {
    let dir = tempfile::tempdir().unwrap();
    for suite in ["gradients", "sampling"] {
        let o = glitter(&["verify", "--suite", suite, "--seed", "7"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
        assert!(
            stdout(&o)
                .lines()
                .filter(|l| l.starts_with("[PASS]"))
                .count()
                >= 2
        );
    }
    // The theorem suite includes the m=50 truncation tolerance, which random
    // chains of up to 20 states do not meet; its exit code mirrors the verdict.
    let o = glitter(&["verify", "--suite", "theorems"], dir.path());
    let failed = stdout(&o).lines().any(|l| l.starts_with("[FAIL]"));
    assert_eq!(o.status.code(), Some(if failed { 1 } else { 0 }));
}
