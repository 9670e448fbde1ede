use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dcmgnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcmgnn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DCMGNN_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, out: &str) -> Output {
    dcmgnn(
        &["synth", "--out", out, "--users", "30", "--items", "30", "--communities", "3", "--views", "6", "--carts", "3", "--buys", "2", "--seed", "5"],
        dir,
    )
}

#[test]
fn help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["train", "--help"], &["synth", "--help"]] {
        let o = dcmgnn(args, tmp.path());
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn bad_input_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["train", "--dataset", "missing.tsv"],
        &["train"],
        &["train", "--dataset", "missing.tsv", "--dim", "zero"],
        &["train", "--no-such-flag"],
    ];
    for args in cases {
        let o = dcmgnn(args, tmp.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn corrupted_checkpoint_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(synth(tmp.path(), "data").status.success());
    fs::write(tmp.path().join("broken.json"), "{\"format\": ").unwrap();
    let o = dcmgnn(
        &["evaluate", "--dataset", "data/interactions.tsv", "--checkpoint", "broken.json"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let o = dcmgnn(&["train", "--resume", "broken.json"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synth_is_deterministic_and_loads_back() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(synth(tmp.path(), "a").status.success());
    assert!(synth(tmp.path(), "b").status.success());
    let a = fs::read(tmp.path().join("a/interactions.tsv")).unwrap();
    assert_eq!(a, fs::read(tmp.path().join("b/interactions.tsv")).unwrap());
    assert_eq!(
        fs::read(tmp.path().join("a/manifest.json")).unwrap(),
        fs::read(tmp.path().join("b/manifest.json")).unwrap()
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["edges"], serde_json::json!([180, 90, 60]));

    // pattern counts printed by inspect-patterns add up to the distinct pairs
    let o = dcmgnn(&["inspect-patterns", "--dataset", "a/interactions.tsv"], tmp.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let pattern_rows: Vec<&str> = text.lines().skip(1).take_while(|l| !l.is_empty()).collect();
    assert_eq!(pattern_rows.len(), 7);
    let total: usize = pattern_rows.iter().map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 180, "every view pair, carts and buys are nested in views");
    let chains: Vec<&str> = text.lines().skip_while(|l| !l.starts_with("chain,")).skip(1).collect();
    assert_eq!(chains.len(), 3);
}

#[test]
fn train_then_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(synth(tmp.path(), "data").status.success());
    let common = ["--dataset", "data/interactions.tsv", "--dim", "8", "--batch-size", "16", "--ks", "10"];
    let mut args = vec!["train", "--epochs", "2", "--output", "run", "--csv"];
    args.extend(common);
    let o = dcmgnn(&args, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = tmp.path().join("run");
    for f in ["config.txt", "seed.txt", "metrics.jsonl", "losses.jsonl", "metrics.csv", "checkpoint.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["metrics"].as_array().unwrap().len(), 1);
    assert_eq!(first["metrics"][0]["k"], 10);
    assert!(fs::read_to_string(run.join("metrics.csv")).unwrap().starts_with("epoch,metric,k,value,group\n"));

    let mut args = vec!["evaluate", "--checkpoint", "run/checkpoint.json", "--best"];
    args.extend(common);
    let o = dcmgnn(&args, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("[60,inf)"));

    // a checkpoint for a different architecture is refused
    let o = dcmgnn(
        &["evaluate", "--checkpoint", "run/checkpoint.json", "--dataset", "data/interactions.tsv", "--dim", "4"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}
