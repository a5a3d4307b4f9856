use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentview::corpus::{Signal, ViewMatrix};
use latentview::embedding::Embedding;
use latentview::manifest::RunManifest;

const SUBCOMMANDS: [&str; 9] = [
    "synth",
    "ingest",
    "filter",
    "sample",
    "split",
    "factorize",
    "cluster",
    "evaluate",
    "pipeline",
];

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latentview"));
    c.env_remove("LV_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    cli().args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "latentview {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Compares against a stored file; `LV_BLESS=1` rewrites it instead.
fn assert_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("LV_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, want, "help text drifted from {}", path.display());
}

#[test]
fn help_text_matches_golden_files() {
    let top = run(&["--help"]);
    assert!(top.status.success());
    assert_golden("help.txt", &String::from_utf8(top.stdout).unwrap());
    for sub in SUBCOMMANDS {
        let out = run(&[sub, "--help"]);
        assert!(out.status.success());
        assert_golden(
            &format!("help_{sub}.txt"),
            &String::from_utf8(out.stdout).unwrap(),
        );
    }
}

#[test]
fn help_lists_a_default_for_every_valued_flag() {
    // flags naming files or directories have no default
    let path_flags = [
        "--out-dir",
        "--out",
        "--views",
        "--owners",
        "--matrix",
        "--split-dir",
        "--factors",
        "--factors-dir",
        "--embedding",
        "--manifest",
    ];
    for sub in SUBCOMMANDS {
        let text = String::from_utf8(run(&[sub, "--help"]).stdout).unwrap();
        let mut sections: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            let t = line.trim_start();
            if line.starts_with("      --") || line.starts_with("  -") {
                sections.push((t.to_owned(), String::new()));
            } else if let Some(last) = sections.last_mut() {
                last.1.push_str(t);
                last.1.push('\n');
            }
        }
        assert!(!sections.is_empty());
        for (head, body) in sections {
            let flag = head
                .split_whitespace()
                .find(|w| w.starts_with("--"))
                .unwrap();
            if !head.contains('<') || path_flags.contains(&flag) {
                continue;
            }
            assert!(
                head.contains("[default") || body.contains("[default"),
                "{sub} {flag} shows no default"
            );
        }
    }
}

fn small_synth(dir: &Path, seed: &str) {
    ok(&[
        "synth",
        "--out-dir",
        s(dir),
        "--items",
        "300",
        "--users",
        "200",
        "--density",
        "0.05",
        "--seed",
        seed,
    ]);
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    small_synth(&a, "5");
    let env_run = cli()
        .args([
            "synth",
            "--out-dir",
            s(&b),
            "--items",
            "300",
            "--users",
            "200",
            "--density",
            "0.05",
        ])
        .env("LV_SEED", "5")
        .output()
        .unwrap();
    assert!(env_run.status.success());
    let flag_wins = cli()
        .args([
            "synth",
            "--out-dir",
            s(&c),
            "--items",
            "300",
            "--users",
            "200",
            "--density",
            "0.05",
            "--seed",
            "6",
        ])
        .env("LV_SEED", "5")
        .output()
        .unwrap();
    assert!(flag_wins.status.success());
    let views = |d: &Path| std::fs::read(d.join("views.tsv")).unwrap();
    assert_eq!(views(&a), views(&b));
    assert_ne!(views(&a), views(&c));
}

#[test]
fn staged_run_with_default_dim_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let manifest = d.join("manifest.json");
    let m = s(&manifest);
    small_synth(&d.join("synth"), "3");
    ok(&[
        "ingest",
        "--views",
        s(&d.join("synth/views.tsv")),
        "--owners",
        s(&d.join("synth/owners.tsv")),
        "--out",
        s(&d.join("matrix.tsv")),
        "--manifest",
        m,
    ]);
    ok(&[
        "filter",
        "--matrix",
        s(&d.join("matrix.tsv")),
        "--out",
        s(&d.join("filtered.tsv")),
        "--min-count",
        "3",
        "--manifest",
        m,
    ]);
    ok(&[
        "sample",
        "--matrix",
        s(&d.join("filtered.tsv")),
        "--out",
        s(&d.join("sampled.tsv")),
        "--manifest",
        m,
    ]);
    ok(&[
        "split",
        "--matrix",
        s(&d.join("sampled.tsv")),
        "--out-dir",
        s(&d.join("split")),
        "--manifest",
        m,
    ]);
    ok(&[
        "factorize",
        "--matrix",
        s(&d.join("sampled.tsv")),
        "--split-dir",
        s(&d.join("split")),
        "--out-dir",
        s(&d.join("factors")),
        "--epochs",
        "2",
        "--manifest",
        m,
    ]);
    let factors = Embedding::read_tsv(&d.join("factors/item_factors.tsv")).unwrap();
    assert_eq!(factors.dim(), 100);
    let log = std::fs::read_to_string(d.join("factors/train_log.tsv")).unwrap();
    assert!(log.starts_with("# lambda=0.01 dim=100 "), "{log}");
    assert_eq!(log.lines().count(), 1 + 3);

    ok(&[
        "cluster",
        "--factors",
        s(&d.join("factors/item_factors.tsv")),
        "--out-dir",
        s(&d.join("labels")),
        "--k",
        "3,5",
        "--manifest",
        m,
    ]);
    assert!(d.join("labels/labels_k3.tsv").is_file());
    assert!(d.join("labels/labels_k5.tsv").is_file());
    ok(&[
        "evaluate",
        "--matrix",
        s(&d.join("sampled.tsv")),
        "--split-dir",
        s(&d.join("split")),
        "--factors-dir",
        s(&d.join("factors")),
        "--owners",
        s(&d.join("synth/owners.tsv")),
        "--out-dir",
        s(&d.join("eval")),
        "--top-n",
        "5",
        "--baseline-pairs",
        "1000",
        "--manifest",
        m,
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["jaccard_curve"].as_array().unwrap().len(), 5);
    assert!(report["rmse"].as_f64().unwrap() > 0.0);

    let record = RunManifest::load_or_new(&manifest).unwrap();
    let commands: Vec<&str> = record.stages.iter().map(|st| st.command.as_str()).collect();
    assert_eq!(
        commands,
        [
            "ingest",
            "filter",
            "sample",
            "split",
            "factorize",
            "cluster",
            "evaluate"
        ]
    );
    assert_eq!(
        record.stages[0].outputs.keys().collect::<Vec<_>>(),
        ["matrix.tsv"]
    );
    assert_eq!(record.stages[2].seed, Some(0));
}

#[test]
fn sample_adds_exactly_the_drawn_negatives() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth", "--out-dir", s(&d.join("synth")), "--seed", "8"]);
    ok(&[
        "ingest",
        "--views",
        s(&d.join("synth/views.tsv")),
        "--out",
        s(&d.join("matrix.tsv")),
    ]);
    ok(&[
        "sample",
        "--matrix",
        s(&d.join("matrix.tsv")),
        "--out",
        s(&d.join("sampled.tsv")),
        "--seed",
        "8",
    ]);
    let before = ViewMatrix::read_tsv(&d.join("matrix.tsv"), None).unwrap();
    let after = ViewMatrix::read_tsv(&d.join("sampled.tsv"), None).unwrap();
    let negatives = after
        .entries()
        .filter(|e| e.signal == Signal::Negative)
        .count();
    assert_eq!(after.n_positive(), before.n_positive());
    assert_eq!(after.nnz(), before.n_positive() + negatives);
    let text = std::fs::read_to_string(d.join("sampled.tsv")).unwrap();
    assert_eq!(text.lines().count(), after.nnz());
    let kept: Vec<_> = after
        .triples()
        .into_iter()
        .filter(|t| t.2 == Signal::Positive)
        .collect();
    assert_eq!(kept, before.triples().into_iter().collect::<Vec<_>>());
}

#[test]
fn sweep_and_explicit_k_are_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = (0..250).map(|k| {
        (
            format!("i{k}"),
            vec![(k % 17) as f64, (k / 17) as f64 * 0.5],
        )
    });
    let factors = tmp.path().join("f.tsv");
    Embedding::from_rows(2, rows)
        .unwrap()
        .write_tsv(&factors)
        .unwrap();
    ok(&[
        "cluster",
        "--factors",
        s(&factors),
        "--out-dir",
        s(&tmp.path().join("one")),
        "--k",
        "200",
    ]);
    let labels = std::fs::read_to_string(tmp.path().join("one/labels_k200.tsv")).unwrap();
    assert_eq!(labels.lines().count(), 250);

    // the sweep reaches K = 500 > 250 items and must stop with a diagnostic
    let out = run(&[
        "cluster",
        "--factors",
        s(&factors),
        "--out-dir",
        s(&tmp.path().join("sweep")),
        "--sweep",
    ]);
    assert!(!out.status.success());
    assert!(tmp.path().join("sweep/labels_k200.tsv").is_file());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("latentview: error:"), "{err}");

    let both = run(&[
        "cluster",
        "--factors",
        s(&factors),
        "--out-dir",
        "x",
        "--sweep",
        "--k",
        "3",
    ]);
    assert!(!both.status.success());
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.tsv");
    let out = run(&[
        "filter",
        "--matrix",
        s(&missing),
        "--out",
        s(&tmp.path().join("o.tsv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("nope.tsv"));

    let bad = tmp.path().join("bad.tsv");
    std::fs::write(&bad, "i1\tu1\ni2\n").unwrap();
    let out = run(&[
        "ingest",
        "--views",
        s(&bad),
        "--out",
        s(&tmp.path().join("m.tsv")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bad.tsv:2:"), "{err}");

    assert!(!run(&["factorize", "--bogus"]).status.success());
}
