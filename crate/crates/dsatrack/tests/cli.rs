use std::path::Path;
use std::process::{Command, Output};

use dsatrack::weights::{decode_tensors, encode_tensors};

const SMALL: &str = "d_model = 24\nheads = 3\ndepth = 4\ndsa_layers = 2,4\nretention = 0.9,0.7\n";

fn dsatrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsatrack")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.cfg");
    std::fs::write(&p, SMALL).unwrap();
    s(&p)
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&dsatrack(&["--help"])), 0);
    for sub in ["gradcheck", "synth", "train", "track", "prune", "eval", "flops"] {
        assert_eq!(code(&dsatrack(&[sub, "--help"])), 0, "{sub}");
    }
    assert_eq!(code(&dsatrack(&["frobnicate"])), 1);
    assert_eq!(code(&dsatrack(&[])), 1);
    assert_eq!(code(&dsatrack(&["--set", "lr=abc", "flops"])), 1);
    assert_eq!(code(&dsatrack(&["--set", "nosuchkey=1", "flops"])), 1);
    assert_eq!(code(&dsatrack(&["prune", "--variant", "d5"])), 1);
}

#[test]
fn prune_from_contribution_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("table1.json");
    std::fs::write(
        &table,
        r#"{"2":0.1325,"3":0.0739,"4":0.0615,"5":0.0581,"6":0.0429,"7":0.0457,"8":0.0438,"9":0.0358,"10":0.0428,"11":0.0657,"12":0.1444}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = dsatrack(&["--out", &s(&out), "prune", "--variant", "d7", "--contributions", &s(&table)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("removed 6,7,8,9,10"));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("prune_spec.json")).unwrap()).unwrap();
    assert_eq!(doc["removed"], serde_json::json!([6, 7, 8, 9, 10]));
    assert_eq!(doc["method"], "contribution-ranking");
    let pruned = dsatrack::weights::load_model(&out.join("pruned-d7.dsaw")).unwrap();
    let kept: Vec<usize> = pruned.layers().iter().map(|l| l.index).collect();
    assert_eq!(kept, [1, 2, 3, 4, 5, 11, 12]);

    let o = dsatrack(&["--out", &s(&out), "prune", "--variant", "d4", "--method", "sp"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("removed 2,3,4,5,6,7,8,9"));
}

#[test]
fn flops_table_lists_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsatrack(&["--out", &s(dir.path()), "flops"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("3 5 6 7 8 9 10 11"));
    let csv = std::fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 8);
}

#[test]
fn gradcheck_passes() {
    let o = dsatrack(&["gradcheck", "--seed", "2"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).matches(" ok").count(), 11);
}

#[test]
fn synth_train_track_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let o = dsatrack(&[
        "--out",
        &s(&data),
        "synth",
        "--count",
        "2",
        "--length",
        "6",
        "--data-seed",
        "70",
        "--format",
        "png",
    ]);
    assert_eq!(code(&o), 0);
    assert!(data.join("seq-70/00000001.png").is_file());

    let run = dir.path().join("run");
    let o = dsatrack(&[
        "--config",
        &cfg,
        "--out",
        &s(&run),
        "train",
        "--steps",
        "3",
        "--count",
        "1",
        "--length",
        "6",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read_to_string(run.join("train_loss.csv")).unwrap().lines().count(),
        4
    );
    let weights = s(&run.join("model.dsaw"));

    // Sequences come from the data root when no directories are given.
    let tracked = dir.path().join("tracked");
    let o = Command::new(env!("CARGO_BIN_EXE_dsatrack"))
        .args(["--weights", &weights, "--jobs", "2", "--out", &s(&tracked), "track"])
        .env("DSATRACK_DATA", &data)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for seq in ["seq-70", "seq-71"] {
        let boxes = dsatrack::seqio::read_boxes(&tracked.join(seq).join("results.txt")).unwrap();
        assert_eq!(boxes.len(), 6);
    }

    let o = dsatrack(&[
        "--weights",
        &weights,
        "--out",
        &s(&run),
        "eval",
        &s(&data.join("seq-70")),
        &s(&data.join("seq-71")),
    ]);
    assert_eq!(code(&o), 0);
    for f in ["metrics.csv", "curves.svg", "summary.json"] {
        assert!(run.join("eval").join(f).is_file(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("eval/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["sequences"], 2);
    assert_eq!(summary["frames"], 12);
}

#[test]
fn track_without_sequences_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_dsatrack"))
        .arg("track")
        .env_remove("DSATRACK_DATA")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn non_finite_weights_exit_with_numerical_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = dsatrack(&[
        "--config",
        &cfg,
        "--out",
        &s(&out),
        "train",
        "--steps",
        "1",
        "--count",
        "1",
        "--length",
        "4",
    ]);
    assert_eq!(code(&o), 0);
    let path = out.join("model.dsaw");
    let mut tensors = decode_tensors(&std::fs::read(&path).unwrap()).unwrap();
    let last = tensors.last_mut().unwrap();
    last.1.data_mut()[0] = f64::NAN;
    std::fs::write(&path, encode_tensors(&tensors).unwrap()).unwrap();
    let o = dsatrack(&[
        "--weights",
        &s(&path),
        "--out",
        &s(&out),
        "eval",
        "--synthetic",
        "--length",
        "4",
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
