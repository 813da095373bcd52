use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const GOLDEN_PREPROCESS_HASH: &str = "efb2672f271dc571388c5a3e2d8b0c65df78067781942ee0d6734d3bbd683f06";

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/synthetic")
}

fn hred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hred")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hred(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn preprocess(out: &Path) -> String {
    let d = bundled();
    ok(&[
        "preprocess",
        "--script",
        s(&d.join("script.txt")),
        "--qa",
        s(&d.join("qa.txt")),
        "--gazetteer",
        s(&d.join("gazetteer.txt")),
        "--out",
        s(out),
    ])
}

fn train_small(data: &Path, out: &Path, epochs: &str, lr: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--d-e",
        "8",
        "--d-h",
        "12",
        "--d-c",
        "12",
        "--epochs",
        epochs,
        "--lr",
        lr,
    ];
    args.extend_from_slice(extra);
    hred(&args)
}

#[test]
fn synth_reproduces_the_bundled_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", s(tmp.path())]);
    for f in ["script.txt", "qa.txt", "gazetteer.txt"] {
        assert_eq!(
            fs::read(tmp.path().join(f)).unwrap(),
            fs::read(bundled().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn preprocess_output_is_hash_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = preprocess(tmp.path());
    let mut h = Sha256::new();
    for line in stdout.lines().filter(|l| !l.starts_with("vocab ")) {
        let p = Path::new(line);
        let bytes = fs::read(p).unwrap();
        h.update(p.file_name().unwrap().to_str().unwrap().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    let got: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(got, GOLDEN_PREPROCESS_HASH);
    assert!(stdout.contains("vocab 117 tokens"), "{stdout}");
    let stats: Value = serde_json::from_slice(&fs::read(tmp.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["vocab_size"], 117);
}

#[test]
fn train_eval_sample_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    preprocess(&data);
    let out = train_small(&data, &run, "2", "0.005", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["best.ckpt", "last.ckpt", "train.log"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for l in &lines {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f.len(), 3, "{l}");
        f[0].parse::<u64>().unwrap();
        assert!(f[1].parse::<f64>().unwrap() > 0.0);
        assert!(f[2].parse::<f64>().unwrap() > 1.0);
    }

    // Resuming continues the same log.
    let last = run.join("last.ckpt");
    let out = train_small(&data, &run, "3", "0.005", &["--resume", s(&last)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with(&lines.join("\n")));

    let best = run.join("best.ckpt");
    let test = data.join("test.triples");
    let stdout = ok(&["eval", "--model", s(&best), "--data", s(&test), "--table"]);
    let report: Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    for k in ["ppl", "ppl_u3", "wer", "wer_u3", "n", "n_w", "n_w_u3"] {
        assert!(report.get(k).is_some(), "{k}");
    }
    assert!(report["ppl"].as_f64().unwrap() < 117.0);
    assert!(stdout.contains("Perplexity@U3"));

    let ctx = "what movie did you see ? </s> i saw it with <person> . </s>";
    let map = ok(&["sample", "--model", s(&best), "--context", ctx, "--max-len", "10"]);
    assert_eq!(map.lines().count(), 1);
    let lp: f64 = map.split('\t').next().unwrap().parse().unwrap();
    assert!(lp < 0.0);
    let args = [
        "sample",
        "--model",
        s(&best),
        "--context",
        ctx,
        "--mode",
        "sample",
        "--samples",
        "3",
        "--seed",
        "5",
    ];
    let a = ok(&args);
    assert_eq!(a.lines().count(), 3);
    assert_eq!(a, ok(&args));
}

#[test]
fn ngram_baselines_and_saved_models() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    preprocess(&data);
    let stdout = ok(&["ngram", "--data", s(&data), "--method", "all", "--split", "valid"]);
    let reports: Vec<Value> = stdout
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), 4);
    assert!(stdout.contains("modified-kn 3-gram"));

    let saved = tmp.path().join("kn.txt");
    let trained = ok(&["ngram", "--data", s(&data), "--order", "2", "--save", s(&saved)]);
    let loaded = ok(&["ngram", "--data", s(&data), "--load", s(&saved)]);
    assert_eq!(trained.lines().next(), loaded.lines().next());
    assert!(
        !hred(&["ngram", "--data", s(&data), "--method", "all", "--save", s(&saved)])
            .status
            .success()
    );
    assert!(!hred(&["ngram", "--data", s(&data), "--method", "laplace"])
        .status
        .success());
}

#[test]
fn failures_exit_nonzero_and_leave_no_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    preprocess(&data);
    let run = tmp.path().join("run");
    let out = train_small(&data, &run, "2", "0", &[]);
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("learning rate"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["best.ckpt", "last.ckpt", "train.log"] {
        assert!(!run.join(f).exists(), "{f} left behind");
    }

    let missing = tmp.path().join("missing.ckpt");
    assert!(
        !hred(&["eval", "--model", s(&missing), "--data", s(&data.join("test.triples"))])
            .status
            .success()
    );
    assert!(!hred(&["train", "--data", s(&data), "--out", s(&run), "--bogus-flag"])
        .status
        .success());
    assert!(!hred(&["frobnicate"]).status.success());
    let out = hred(&[
        "preprocess",
        "--script",
        s(&tmp.path().join("nope.txt")),
        "--out",
        s(&run),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));
}
