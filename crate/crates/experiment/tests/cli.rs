mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{setup, FILE_PROFILE, QUICK_TRAIN};

fn seqdistill(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqdistill"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

#[test]
fn full_pipeline_then_verify() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), QUICK_TRAIN, FILE_PROFILE);
    let all = seqdistill(&["all", "--config", "config.toml"], tmp.path());
    assert_eq!(code(&all), 0, "{}", text(&all));
    let out = text(&all);
    assert!(out.contains("Uplift (%)"), "{out}");
    assert!(tmp.path().join("out/reports/table.txt").is_file());

    let again = seqdistill(&["ingest", "--config", "config.toml"], tmp.path());
    assert!(text(&again).contains("up-to-date"));

    let select = seqdistill(
        &[
            "select",
            "--config",
            "config.toml",
            "--variant",
            "baseline",
            "--seed",
            "0",
        ],
        tmp.path(),
    );
    assert_eq!(code(&select), 0, "{}", text(&select));
    assert!(
        text(&select).contains("Validation NDCG@"),
        "{}",
        text(&select)
    );

    let verify = seqdistill(&["verify", "--config", "config.toml"], tmp.path());
    assert_eq!(code(&verify), 0, "{}", text(&verify));
    assert_eq!(text(&verify).matches("verify: ok").count(), 4);
}

#[test]
fn variant_and_seed_flags_restrict_training() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), QUICK_TRAIN, FILE_PROFILE);
    for verb in ["ingest", "profile"] {
        assert_eq!(
            code(&seqdistill(&[verb, "--config", "config.toml"], tmp.path())),
            0
        );
    }
    let o = seqdistill(
        &[
            "train",
            "--config",
            "config.toml",
            "--variant",
            "distilled",
            "--seed",
            "1",
            "--out",
            "alt",
        ],
        tmp.path(),
    );
    assert_eq!(
        code(&o),
        3,
        "a fresh --out has no ingest artifacts: {}",
        text(&o)
    );

    let o = seqdistill(
        &[
            "train",
            "--config",
            "config.toml",
            "--variant",
            "distilled",
            "--seed",
            "1",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", text(&o));
    let runs: Vec<String> = fs::read_dir(tmp.path().join("out/runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(runs.len(), 1);
    assert!(
        runs[0].starts_with("distilled-") && runs[0].ends_with("-s1"),
        "{runs:?}"
    );

    let bad = seqdistill(
        &["train", "--config", "config.toml", "--variant", "teacher"],
        tmp.path(),
    );
    assert_ne!(code(&bad), 0);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), QUICK_TRAIN, FILE_PROFILE);

    let o = seqdistill(&["ingest"], tmp.path());
    assert_eq!(code(&o), 2, "missing --config: {}", text(&o));

    let cfg = fs::read_to_string(tmp.path().join("config.toml")).unwrap();
    fs::write(
        tmp.path().join("badcol.toml"),
        cfg.replace(
            "max_len = 12",
            "max_len = 12\n[data.columns]\ntimestamp = \"when\"",
        ),
    )
    .unwrap();
    let o = seqdistill(&["ingest", "--config", "badcol.toml"], tmp.path());
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("when"), "{}", text(&o));

    fs::write(
        tmp.path().join("interp.toml"),
        cfg.replace("name = \"small\"", "name = \"${HOME}\""),
    )
    .unwrap();
    let o = seqdistill(&["ingest", "--config", "interp.toml"], tmp.path());
    assert_eq!(code(&o), 2, "{}", text(&o));

    let o = seqdistill(&["train", "--config", "config.toml"], tmp.path());
    assert_eq!(code(&o), 3, "train before ingest: {}", text(&o));

    assert_eq!(
        code(&seqdistill(
            &["ingest", "--config", "config.toml"],
            tmp.path()
        )),
        0
    );
    fs::write(tmp.path().join("out/ingest/.lock"), "1\n").unwrap();
    fs::remove_file(tmp.path().join("out/ingest/manifest.json")).unwrap();
    let o = seqdistill(&["ingest", "--config", "config.toml"], tmp.path());
    assert_eq!(code(&o), 5, "{}", text(&o));
}

#[test]
fn unreachable_llm_endpoint_is_an_external_error() {
    let tmp = tempfile::tempdir().unwrap();
    let profile = r#"
[profile]
source = "llm"
parallelism = 1
retry = { max_attempts = 1, initial_backoff_ms = 0, max_backoff_ms = 0 }
[profile.llm]
endpoint = "http://127.0.0.1:9/v1/chat/completions"
timeout_secs = 2
[profile.encoder]
mock = true
dim = 16
[profile.projection]
method = "pca"
"#;
    setup(tmp.path(), QUICK_TRAIN, profile);
    assert_eq!(
        code(&seqdistill(
            &["ingest", "--config", "config.toml"],
            tmp.path()
        )),
        0
    );
    let o = seqdistill(&["profile", "--config", "config.toml"], tmp.path());
    assert_eq!(code(&o), 4, "{}", text(&o));
    let o = seqdistill(
        &["profile", "--config", "config.toml", "--mock-llm"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", text(&o));
}

#[test]
fn toy_data_verb_writes_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let o = seqdistill(&["toy-data", "--out", "toy"], tmp.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    for f in [
        "interactions.tsv",
        "items.tsv",
        "targets.tsv",
        "clusters.tsv",
    ] {
        assert!(tmp.path().join("toy").join(f).is_file(), "{f}");
    }
    let rows = fs::read_to_string(tmp.path().join("toy/targets.tsv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 500);
}
