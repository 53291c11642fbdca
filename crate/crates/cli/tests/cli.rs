use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dhumor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhumor")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic corpus under `dir/data`: 32 train, 8 test, 8x16 embeddings.
fn synthetic(dir: &Path) -> String {
    let data = dir.join("data");
    let o = dhumor(&["embed-import", "--synthetic", "--seed", "3", "--run-dir", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    data.join("manifest.jsonl").to_str().unwrap().to_string()
}

const SMALL: [&str; 8] = ["--heads", "2", "--lr", "1e-3", "--epochs", "3", "--batch", "8"];

#[test]
fn stats_on_two_records() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.jsonl");
    fs::write(
        &manifest,
        concat!(
            r#"{"id":"a","image_file":"a.png","dark_humor":"No","split":"train"}"#,
            "\n",
            r#"{"id":"b","image_file":"b.png","dark_humor":"Yes","target":"Disability","intensity":3,"split":"train"}"#,
            "\n"
        ),
    )
    .unwrap();
    let o = dhumor(&["stats", "--manifest", p(&manifest)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("Disability                      0      0      1       1"), "{out}");
    assert!(out.trim_end().ends_with("2 records: train 2 (1 dark, 1 non-dark)"), "{out}");
}

#[test]
fn bad_manifest_line_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.jsonl");
    fs::write(&manifest, r#"{"id":"bad7","image_file":"x.png","dark_humor":"No","target":"Other","intensity":1,"split":"train"}"#).unwrap();
    let o = dhumor(&["stats", "--manifest", p(&manifest)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad7"));
}

#[test]
fn gradcheck_passes() {
    let o = dhumor(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).trim_end().ends_with("PASS"));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(dhumor(&["train"]).status.code(), Some(1));
    assert_eq!(dhumor(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dhumor(&["--help"]).status.code(), Some(0));
    assert_eq!(dhumor(&["--version"]).status.code(), Some(0));
}

#[test]
fn target_task_without_dark_records_is_rejected_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.jsonl");
    fs::write(
        &manifest,
        concat!(
            r#"{"id":"a","image_file":"a.png","dark_humor":"No","split":"train"}"#,
            "\n",
            r#"{"id":"b","image_file":"b.png","dark_humor":"No","split":"train"}"#,
            "\n"
        ),
    )
    .unwrap();
    let run = tmp.path().join("run");
    let o = dhumor(&["train", "--manifest", p(&manifest), "--task", "target", "--run-dir", p(&run)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no records are eligible for task target"), "{}", stderr(&o));
    assert!(!run.exists());
}

#[test]
fn too_few_streams_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synthetic(tmp.path());
    let o = dhumor(&["train", "--manifest", &manifest, "--streams", "i", "--run-dir", p(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("at least two streams"));
}

#[test]
fn train_then_eval_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synthetic(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for run in [&a, &b] {
        let mut args = vec!["train", "--manifest", &manifest, "--task", "intensity", "--run-dir", p(run)];
        args.extend(SMALL);
        let o = dhumor(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("test acc"));
    }
    for name in ["config.toml", "history.jsonl", "checkpoint-best.bin", "checkpoint-final.bin", "metrics.json", "metrics.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_eq!(fs::read_to_string(a.join("history.jsonl")).unwrap().lines().count(), 3);

    let metrics = fs::read(a.join("metrics.json")).unwrap();
    let o = dhumor(&["eval", "--manifest", &manifest, "--run-dir", p(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("TCRNet[TIR]"));
    // eval of the final checkpoint reproduces the metrics train wrote
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), metrics);

    let o = dhumor(&["eval", "--manifest", &manifest, "--run-dir", p(&a), "--task", "target"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablation_covers_every_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synthetic(tmp.path());
    let run = tmp.path().join("ablate");
    let mut args = vec!["ablate", "--manifest", &manifest, "--tasks", "dh,intensity", "--run-dir", p(&run)];
    args.extend(SMALL);
    let o = dhumor(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(run.join("comparison.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "{table}");
    assert!(lines[1].starts_with("full[TIR]/fused-48 | "));
    assert!(lines[2].starts_with("no-text[IR]/fused-16 | "));
    assert!(lines[3].starts_with("no-image[TR]/fused-16 | "));
    assert!(lines[4].starts_with("no-reasoning[TI]/fused-16 | "));
    for variant in ["full", "no-text", "no-image", "no-reasoning"] {
        for task in ["dh", "intensity"] {
            assert!(run.join(variant).join(task).join("checkpoint-final.bin").is_file());
        }
    }

    // the full row matches a standalone train on the same settings
    let solo = tmp.path().join("solo");
    let mut args = vec!["train", "--manifest", &manifest, "--task", "intensity", "--run-dir", p(&solo)];
    args.extend(SMALL);
    assert!(dhumor(&args).status.success());
    assert_eq!(
        fs::read(solo.join("metrics.json")).unwrap(),
        fs::read(run.join("full/intensity/metrics.json")).unwrap()
    );

    let o = dhumor(&["ablate", "--manifest", &manifest, "--streams", "ti"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn agreement_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("labels.csv");
    fs::write(&csv, "id,A1,A2,A3\nm1,1,1,2\nm2,2,3,3\nm3,3,3,3\nm4,3,2,3\n").unwrap();
    let out = tmp.path().join("out");
    let o = dhumor(&["agreement", "--input", p(&csv), "--task", "intensity", "--run-dir", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    // A1 against A2 is the hand case: quadratic weighted kappa 7/11
    assert!(text.contains("Intensity  A1&A2             20.00       63.64    12.20"), "{text}");
    assert!(text.trim_end().ends_with("4 items, 3 annotator pairs, Fleiss kappa 12.20"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("agreement.json")).unwrap()).unwrap();
    assert_eq!(json["pairs"].as_array().unwrap().len(), 3);
    assert!(json["pairs"][0]["weighted"].is_number());

    let o = dhumor(&["agreement", "--input", p(&csv), "--task", "dh"]);
    assert_eq!(o.status.code(), Some(1), "intensity labels are not yes/no");

    fs::write(&csv, "id,A1,A2\nm1,Yes,No\nm2,No,No\n").unwrap();
    let o = dhumor(&["agreement", "--input", p(&csv), "--task", "dh"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

const DOC: &str = "Meme Summary: a cat\nImplied Joke: none\nNarrative Structure: one panel\n\
Emotional Effect: mild\nDark Attributes: none\nTarget: nobody";

#[test]
fn explain_with_a_mock_endpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synthetic(tmp.path());
    let data = tmp.path().join("data");
    for i in 0..40 {
        fs::write(data.join(format!("syn-{i:04}.png")), b"png").unwrap();
    }
    let script = tmp.path().join("script.json");
    fs::write(&script, serde_json::to_string(&[DOC]).unwrap()).unwrap();
    let run = tmp.path().join("explain");
    let endpoint = format!("mock:{}", p(&script));
    let o = dhumor(&["explain", "--manifest", &manifest, "--endpoint", &endpoint, "--limit", "3", "--run-dir", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("refined 3 memes, 3 converged"));
    let refined = fs::read_to_string(run.join("refined.jsonl")).unwrap();
    assert_eq!(refined.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(refined.lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "syn-0000");
    assert_eq!(fs::read_to_string(run.join("traces.jsonl")).unwrap().lines().count(), 3);

    let o = dhumor(&["explain", "--manifest", &manifest, "--endpoint", &endpoint, "--threshold", "1.5", "--run-dir", p(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!tmp.path().join("x").exists());
}
