use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
n_speakers = 8
n_eval_speakers = 4
utts_per_speaker = 6
frames_dim = 6
hidden = [8]
embedding_dim = 6
epochs = 3
classes_per_batch = 4
utts_per_class = 2
n_target = 30
n_nontarget = 60
";

fn spkembed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spkembed"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = spkembed(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts failure with a single-line diagnostic and returns it.
fn fails(args: &[&str]) -> String {
    let out = spkembed(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic not one line: {err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn full_pipeline(dir: &Path, config: &Path) {
    let c = s(config);
    let d = s(dir);
    ok(&["gen", "--seed", "11", "--out-dir", d, "--config", c]);
    ok(&[
        "train",
        "--seed",
        "11",
        "--dataset",
        s(&dir.join("train.dataset")),
        "--out-dir",
        d,
        "--config",
        c,
    ]);
    ok(&[
        "extract",
        "--encoder",
        s(&dir.join("encoder.txt")),
        "--dataset",
        s(&dir.join("eval.dataset")),
        "--out-dir",
        d,
    ]);
    ok(&[
        "score",
        "--embeddings",
        s(&dir.join("embeddings.txt")),
        "--trials",
        s(&dir.join("trials.txt")),
        "--out-dir",
        d,
    ]);
    ok(&[
        "eval",
        "--scores",
        s(&dir.join("scores.txt")),
        "--trials",
        s(&dir.join("trials.txt")),
        "--embeddings",
        s(&dir.join("embeddings.txt")),
        "--dataset",
        s(&dir.join("eval.dataset")),
        "--out-dir",
        d,
        "--config",
        c,
    ]);
}

#[test]
fn eight_speaker_pipeline_emits_all_artifacts_reproducibly() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    full_pipeline(&a, &config);
    full_pipeline(&b, &config);

    for f in [
        "config.toml",
        "train.dataset",
        "eval.dataset",
        "trials.txt",
        "encoder.txt",
        "weights.txt",
        "train.log",
        "embeddings.txt",
        "scores.txt",
        "report.txt",
        "det.txt",
    ] {
        let x = fs::read(a.join(f)).unwrap_or_else(|_| panic!("missing {f}"));
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }
    let report = fs::read_to_string(a.join("report.txt")).unwrap();
    assert!(report.starts_with("eer="), "{report}");
    assert!(!report.contains("sb=NaN"));
    assert_eq!(fs::read_to_string(a.join("train.log")).unwrap().lines().count(), 4);

    let sep: f64 = ok(&["sep", "--weights", s(&a.join("weights.txt"))])
        .trim()
        .parse()
        .unwrap();
    assert!(sep >= 0.0);
    let sb: f64 = ok(&[
        "sb",
        "--embeddings",
        s(&a.join("embeddings.txt")),
        "--dataset",
        s(&a.join("eval.dataset")),
    ])
    .trim()
    .parse()
    .unwrap();
    assert!(report.contains(&format!("sb={sb} ")));
}

#[test]
fn perfectly_separated_scores_give_zero_eer() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("trials.txt"), "# target a b\n1 a b\n1 c d\n0 a c\n0 b d\n").unwrap();
    fs::write(
        p.join("scores.txt"),
        "# score a b\n0.9 a b\n0.8 c d\n0.1 a c\n-0.3 b d\n",
    )
    .unwrap();
    let out = ok(&[
        "eval",
        "--scores",
        s(&p.join("scores.txt")),
        "--trials",
        s(&p.join("trials.txt")),
        "--out-dir",
        s(p),
    ]);
    assert!(out.starts_with("eer=0 "), "{out}");
    assert!(out.contains("sb=NaN"));
    assert!(p.join("det.txt").exists());
    assert!(p.join("config.toml").exists());
}

#[test]
fn missing_and_malformed_files_fail_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let missing = p.join("nope.txt");
    let err = fails(&["sep", "--weights", s(&missing)]);
    assert!(err.contains("nope.txt"), "{err}");

    let bad = p.join("bad.trials");
    fs::write(&bad, "# target a b\n1 a b\nyes c d\n").unwrap();
    fs::write(p.join("scores.txt"), "# score a b\n0.5 a b\n0.1 c d\n").unwrap();
    let err = fails(&[
        "eval",
        "--scores",
        s(&p.join("scores.txt")),
        "--trials",
        s(&bad),
        "--out-dir",
        s(p),
    ]);
    assert!(err.contains("bad.trials:3"), "{err}");

    let cfg = p.join("bad.toml");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let err = fails(&["gen", "--seed", "1", "--out-dir", s(p), "--config", s(&cfg)]);
    assert!(err.contains("no_such_key"), "{err}");
}

#[test]
fn generating_commands_require_seed_and_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!spkembed(&["gen", "--out-dir", s(dir.path())]).status.success());
    assert!(!spkembed(&["gen", "--seed", "1"]).status.success());
    assert!(!spkembed(&["sweep", "--seed", "1", "--system", "m3=0.1"])
        .status
        .success());
}

#[test]
fn sweep_writes_one_row_per_system() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let out = root.path().join("sweep");
    let table = ok(&[
        "sweep",
        "--seed",
        "2",
        "--out-dir",
        s(&out),
        "--config",
        s(&config),
        "--system",
        "loss=softmax,lambda_inter=0",
        "--param",
        "m3",
        "--values",
        "0.1,0.2,0.3",
    ]);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("loss=softmax,lambda_inter=0 "));
    assert!(rows[3].starts_with("m3=0.3 "));
    assert!(rows.iter().all(|r| r.ends_with(" ok")));
    assert_eq!(fs::read_to_string(out.join("sweep.txt")).unwrap(), table);
}
