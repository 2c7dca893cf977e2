use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn polyglot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyglot"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("POLYGLOT_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = polyglot(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest_value(path: &Path, key: &str) -> Option<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim().to_string())
}

fn tiny_corpus(dir: &Path, seed: &str) {
    ok(
        dir,
        &[
            "gen-synthetic",
            "--output",
            "corp",
            "--languages",
            "3",
            "--concepts",
            "12",
            "--train-per-pair",
            "200",
            "--valid-per-pair",
            "10",
            "--test-per-pair",
            "10",
            "--zero-shot-test",
            "10",
            "--seed",
            seed,
        ],
    );
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["no-such-command"],
        vec!["train", "--corpus", "c"],
        vec!["param-count", "--d", "many"],
        vec![
            "translate",
            "--checkpoint",
            "c",
            "--vocab",
            "v",
            "--input",
            "i",
            "--output",
            "o",
            "--src",
            "xa",
            "--tgt",
            "en",
            "--pivot",
        ],
    ] {
        let out = polyglot(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = polyglot(
        dir.path(),
        &["build-vocab", "--corpus", "missing", "--output", "v.txt"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    tiny_corpus(dir.path(), "1");
    ok(
        dir.path(),
        &["build-vocab", "--corpus", "corp", "--output", "v.txt"],
    );
    let out = polyglot(
        dir.path(),
        &[
            "train",
            "--corpus",
            "corp",
            "--vocab",
            "v.txt",
            "--output",
            "r",
            "--resume",
            "nope.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn param_count_reports_bridge_size() {
    let dir = tempfile::tempdir().unwrap();
    let base = ok(
        dir.path(),
        &["param-count", "--d", "512", "--languages", "100"],
    );
    let lalt = ok(
        dir.path(),
        &["param-count", "--d", "512", "--languages", "100", "--lalt"],
    );
    let field = |text: &str, name: &str| -> u64 {
        text.lines()
            .find_map(|l| l.strip_prefix(name))
            .and_then(|r| r.trim().parse().ok())
            .unwrap()
    };
    assert_eq!(field(&lalt, "lalt"), 26_214_400);
    assert_eq!(field(&lalt, "total") - field(&base, "total"), 26_214_400);
    assert!(!dir.path().join("param-count.manifest").exists());

    ok(dir.path(), &["param-count", "--lalt", "--output", "pc"]);
    assert!(dir.path().join("pc/param-count.manifest").exists());
}

#[test]
fn config_layers_under_flags_and_env() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.conf"),
        "# tiny\nseed = 9\nconcepts = 12\nlanguages = 3\ntrain-per-pair = 50\n",
    )
    .unwrap();
    let base = ["gen-synthetic", "--config", "run.conf", "--output"];

    ok(
        dir.path(),
        &[&base[..], &["a", "--languages", "4"]].concat(),
    );
    let m = dir.path().join("a/gen-synthetic.manifest");
    assert_eq!(manifest_value(&m, "seed").as_deref(), Some("9"));
    assert_eq!(manifest_value(&m, "languages").as_deref(), Some("4"));
    assert_eq!(manifest_value(&m, "concepts").as_deref(), Some("12"));

    ok(dir.path(), &[&base[..], &["b", "--seed", "4"]].concat());
    let m = dir.path().join("b/gen-synthetic.manifest");
    assert_eq!(manifest_value(&m, "seed").as_deref(), Some("4"));

    let out = Command::new(env!("CARGO_BIN_EXE_polyglot"))
        .current_dir(dir.path())
        .env("RUST_LOG", "warn")
        .env("POLYGLOT_SEED", "11")
        .args([
            "gen-synthetic",
            "--output",
            "c",
            "--languages",
            "3",
            "--concepts",
            "12",
            "--train-per-pair",
            "50",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let m = dir.path().join("c/gen-synthetic.manifest");
    assert_eq!(manifest_value(&m, "seed").as_deref(), Some("11"));
}

#[test]
fn manifest_replays_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path(), "3");
    let manifest = dir.path().join("corp/gen-synthetic.manifest");
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("# subcommand = gen-synthetic"));
    assert_eq!(manifest_value(&manifest, "seed").as_deref(), Some("3"));

    fs::copy(&manifest, dir.path().join("replay.conf")).unwrap();
    ok(
        dir.path(),
        &[
            "gen-synthetic",
            "--config",
            "replay.conf",
            "--output",
            "again",
        ],
    );
    for f in ["en-xa/train.xa", "en-xb/test.en", "zero-shot/test.xb"] {
        assert_eq!(
            fs::read(dir.path().join("corp").join(f)).unwrap(),
            fs::read(dir.path().join("again").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_corpus(d, "2");
    ok(
        d,
        &[
            "build-vocab",
            "--corpus",
            "corp",
            "--output",
            "vocab/vocab.txt",
        ],
    );
    assert!(d.join("vocab/build-vocab.manifest").exists());

    let model = ["--d", "16", "--d-ff", "32", "--heads", "2", "--layers", "1"];
    let train = [
        "train",
        "--corpus",
        "corp",
        "--vocab",
        "vocab/vocab.txt",
        "--output",
        "run",
        "--steps",
        "20",
        "--batch-tokens",
        "300",
        "--warmup",
        "5",
        "--checkpoint-every",
        "10",
    ];
    ok(d, &[&train[..], &model[..]].concat());
    for f in [
        "model.ckpt",
        "checkpoint-10.ckpt",
        "checkpoint-20.ckpt",
        "train.log",
        "train.manifest",
    ] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(d.join("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 20);

    ok(
        d,
        &[
            "finetune-robt",
            "--corpus",
            "corp",
            "--vocab",
            "vocab/vocab.txt",
            "--checkpoint",
            "run/model.ckpt",
            "--output",
            "robt",
            "--steps",
            "10",
            "--batch",
            "4",
            "--eval-every",
            "5",
            "--dev-sentences",
            "5",
            "--languages",
            "xa,xb",
        ],
    );
    let curve = fs::read_to_string(d.join("robt/curve.txt")).unwrap();
    assert!(curve.lines().filter(|l| !l.starts_with('#')).count() >= 2);
    assert!(d.join("robt/model.ckpt").exists());

    let text = fs::read_to_string(d.join("corp/zero-shot/test.xa")).unwrap();
    let src: Vec<&str> = text.lines().take(4).collect();
    fs::write(d.join("src.txt"), src.join("\n") + "\n").unwrap();
    let tr = [
        "translate",
        "--checkpoint",
        "robt/model.ckpt",
        "--vocab",
        "vocab/vocab.txt",
        "--input",
        "src.txt",
        "--src",
        "xa",
        "--tgt",
        "xb",
    ];
    ok(
        d,
        &[&tr[..], &["--output", "greedy.txt", "--greedy"]].concat(),
    );
    ok(
        d,
        &[&tr[..], &["--output", "beam1.txt", "--beam", "1"]].concat(),
    );
    ok(
        d,
        &[&tr[..], &["--output", "pivot.txt", "--pivot"]].concat(),
    );
    let greedy = fs::read_to_string(d.join("greedy.txt")).unwrap();
    assert_eq!(greedy.lines().count(), 4);
    assert_eq!(greedy, fs::read_to_string(d.join("beam1.txt")).unwrap());
    assert_eq!(
        fs::read_to_string(d.join("pivot.txt"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let ev = [
        "evaluate",
        "--checkpoint",
        "robt/model.ckpt",
        "--vocab",
        "vocab/vocab.txt",
        "--corpus",
        "corp",
        "--limit",
        "5",
        "--greedy",
    ];
    let table = ok(d, &[&ev[..], &["--output", "ev"]].concat());
    assert!(table.contains("BLEU_zero") && table.contains("ACC_zero"));
    let records = fs::read_to_string(d.join("ev/report.txt")).unwrap();
    assert_eq!(
        records
            .lines()
            .filter(|l| l.starts_with("direction"))
            .count(),
        6
    );
    assert!(records.contains("zero_shot=true"));

    let table = ok(
        d,
        &[
            &ev[..],
            &["--output", "ev2", "--reference", "ev/report.txt"],
        ]
        .concat(),
    );
    assert!(table.contains("WR"));
}
